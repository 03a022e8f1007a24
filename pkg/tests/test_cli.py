from __future__ import annotations

import json

import pytest

from ovel.cli import main


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--seed", "4", "--videos", "3", "--clips", "20", "--kb", "30",
                 "--dim", "64", "--noise", "0.3", "--out", str(root)]) == 0
    return root


def test_validate(synth_dir, capsys):
    assert main(["validate", "--data", str(synth_dir)]) == 0
    assert capsys.readouterr().out.startswith("ok: 30 entities, 3 videos")


def test_validate_reports_bad_video(tmp_path, synth_dir, capsys):
    import shutil
    bad = tmp_path / "bad"
    shutil.copytree(synth_dir, bad)
    (bad / "videos" / "v0001.json").write_text("{")
    assert main(["validate", "--data", str(bad)]) == 1
    assert "v0001" in capsys.readouterr().out


def test_run_eval_report(synth_dir, tmp_path, capsys):
    out = tmp_path / "out"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"stride_clips": 5, "k_candidates": 5}))
    assert main(["run", "--data", str(synth_dir), "--config", str(cfg), "--variant", "base,ours",
                 "--variant", "ours-minus-r", "--out", str(out), "--dump-memory"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert set(summary) == {"base", "ours", "ours-minus-r"}

    assert main(["eval", "--traces", str(out), "--policy", "count_wrong"]) == 0
    evald = json.loads(capsys.readouterr().out)
    assert set(evald["ours"]["videos"]) == {"v0000", "v0001", "v0002"}

    assert main(["report", "--traces", str(out / "ours")]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "video_id,rofa,n_records,faults"
    assert main(["report", "--traces", str(out / "ours"), "--latency"]) == 0
    assert capsys.readouterr().out.startswith("bucket_start_clip,mean_latency_s,over_budget")
    assert main(["report", "--traces", str(out), "--format", "json"]) == 0
    assert len(json.loads(capsys.readouterr().out)) == 3


def test_eval_static_and_query(synth_dir, capsys):
    assert main(["eval-static", "--data", str(synth_dir)]) == 0
    assert set(json.loads(capsys.readouterr().out)) == {"R@1", "R@5", "MRR@3", "MRR@5"}
    kb_line = (synth_dir / "kb.jsonl").read_text().splitlines()[0]
    name = json.loads(kb_line)["name"]
    assert main(["query", "--data", str(synth_dir), "--text", name, "-k", "3"]) == 0
    rows = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    assert rows[0]["name"] == name and len(rows) == 3
    assert rows[0]["score"] > rows[1]["score"]


def test_errors_exit_2(tmp_path, capsys):
    assert main(["eval", "--traces", str(tmp_path)]) == 2
    assert main(["run", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 2
    assert "ovel: error" in capsys.readouterr().err
