from __future__ import annotations

import json
from dataclasses import replace

import pytest

from conftest import make_kb, make_stream, unit, write_dataset
from ovel.dataset_io import load_dataset
from ovel.datamodel import DatasetManifest, Entity, KnowledgeBase, RunConfig, validate
from ovel.errors import EmptyInput
from ovel.gateway import FailingBackend, Gateway
from ovel.pipeline import Engine, EventLog, Variant, event_indices, run_benchmark, run_static, run_stream

NAMES = {"e1": "nike pegasus trail", "e2": "nike vomero plus", "e3": "adidas boost ultra"}


def product_kb() -> KnowledgeBase:
    kb = make_kb(NAMES)
    ents = tuple(replace(e, attributes={"line": e.name.split()[1]}) for e in kb.entities)
    return KnowledgeBase(ents, kb.manifest)


@pytest.fixture
def dataset(tmp_path):
    kb = product_kb()
    streams = [
        make_stream(["hello"] * 4 + ["nike pegasus trail"] * 8 + ["wow nike vomero"] * 8, "e1", "v1"),
        make_stream(["adidas boost ultra"] * 20, "e3", "v2"),
        make_stream(["nike vomero plus"] * 6, "e2", "v3"),
    ]
    return write_dataset(tmp_path / "data", kb, streams)


def engine_for(root, **cfg):
    ds = load_dataset(root)
    return ds, Engine.from_dataset(ds, RunConfig(**cfg))


def test_event_indices():
    assert event_indices(20, 10, 5) == [9, 14, 19]
    assert event_indices(6, 10, 5) == [5]
    assert event_indices(10, 10, 5) == [9]
    assert event_indices(0, 10, 5) == []


@pytest.mark.parametrize("variant", [v for v in Variant if v is not Variant.BASE])
def test_cadence_and_replication(dataset, variant):
    ds, eng = engine_for(dataset)
    trace = run_stream(ds.load_stream("v1"), eng, variant)
    assert [r.clip_index for r in trace.records] == list(range(9, 20))
    assert [r.clip_index for r in trace.records if r.inference_event] == [9, 14, 19]
    assert validate(trace) == []


def test_base_infers_every_clip(dataset):
    ds, eng = engine_for(dataset)
    trace = run_stream(ds.load_stream("v1"), eng, Variant.BASE)
    assert len(trace.records) == 11 and all(r.inference_event for r in trace.records)
    assert trace.records[0].predicted_entity_id == "e1"


def test_short_stream_single_event(dataset):
    ds, eng = engine_for(dataset)
    trace = run_stream(ds.load_stream("v3"), eng, Variant.OURS)
    assert [(r.clip_index, r.inference_event) for r in trace.records] == [(5, True)]
    assert trace.records[0].predicted_entity_id == "e2"


def test_ours_links_through_memory(dataset):
    ds, eng = engine_for(dataset)
    events: list[EventLog] = []
    trace = run_stream(ds.load_stream("v2"), eng, Variant.OURS, events)
    assert {r.predicted_entity_id for r in trace.records} == {"e3"}
    assert events[0].memory.get("brand") == "adidas"
    assert set(events[0].prompt_chars) == {"summary", "choice"}
    assert set(events[1].prompt_chars) == {"memory_update", "choice"}


def test_fallback_equivalence(dataset):
    ds = load_dataset(dataset)
    cfg = RunConfig(base_stride=5)
    failing = Engine.from_dataset(ds, cfg, Gateway(FailingBackend()))
    for vid in ds.manifest.video_ids:
        s = ds.load_stream(vid)
        ours = run_stream(s, failing, Variant.OURS)
        base = run_stream(s, failing, Variant.BASE)
        assert [r.predicted_entity_id for r in ours.records] == [r.predicted_entity_id for r in base.records]
        assert ours.faults > 0


def test_silent_window_keeps_previous_prediction(tmp_path):
    kb = make_kb(NAMES)
    s = make_stream(["nike pegasus trail"] * 10 + [""] * 5 + ["   "] * 5, "e1", "v1")
    root = write_dataset(tmp_path, kb, [s])
    ds, eng = engine_for(root)
    for variant in Variant:
        trace = run_stream(ds.load_stream("v1"), eng, variant)
        assert {r.predicted_entity_id for r in trace.records} == {"e1"}


def test_all_silent_stream_predicts_nothing(tmp_path):
    root = write_dataset(tmp_path, make_kb(NAMES), [make_stream([""] * 12, "e1", "v1")])
    ds, eng = engine_for(root)
    trace = run_stream(ds.load_stream("v1"), eng, Variant.OURS)
    assert {r.predicted_entity_id for r in trace.records} == {""}


def test_benchmark_outputs(dataset, tmp_path):
    out = tmp_path / "out"
    rep = run_benchmark(dataset, RunConfig(), [Variant.BASE, Variant.OURS], out, dump_memory=True)
    traces = sorted(p.relative_to(out).as_posix() for p in out.rglob("*.trace.jsonl"))
    assert len(traces) == 6
    assert (out / "report.json").exists() and (out / "ours" / "report.csv").exists()
    assert (out / "ours" / "latency.csv").exists()
    dump = (out / "ours" / "v2.memory.jsonl").read_text().splitlines()
    assert json.loads(dump[0])["entries"][0] == ["brand", "adidas"]
    assert rep.variants["base"].mean_rofa is not None


def test_benchmark_missing_video(dataset, tmp_path):
    manifest = json.loads((dataset / "manifest.json").read_text())
    manifest["video_ids"].append("ghost")
    (dataset / "manifest.json").write_text(json.dumps(manifest))
    rep = run_benchmark(dataset, RunConfig(), [Variant.OURS], tmp_path / "out")
    assert "ghost" in rep.failed
    assert len(rep.variants["ours"].videos) == 3


def test_benchmark_deterministic(dataset, tmp_path):
    for name in ("a", "b"):
        run_benchmark(dataset, RunConfig(parallelism=3), list(Variant), tmp_path / name)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.trace.jsonl"))
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_static_known_ranks(tmp_path):
    dim = 16
    ents = tuple(Entity(f"e{i:02d}", f"thing {i}", unit(i, dim)) for i in range(12))
    kb = KnowledgeBase(ents, DatasetManifest(dim, (), "kb.jsonl"))
    streams = []
    for vid, gt, img in (("v1", "e01", 1), ("v2", "e02", 2), ("v3", "e11", 0), ("v4", "e10", 0)):
        streams.append(make_stream([""], gt, vid, frames={0: [unit(img, dim)]}))
    root = write_dataset(tmp_path, kb, streams)
    rep = run_static(root, RunConfig())
    assert rep.static["R@1"] == 0.5
    assert rep.static["R@5"] == 0.5
    assert rep.static["MRR@5"] == 0.5


def test_static_empty(tmp_path):
    root = write_dataset(tmp_path, make_kb(NAMES), [])
    with pytest.raises(EmptyInput):
        run_static(root, RunConfig())


def test_static_with_gateway(dataset):
    rep = run_static(dataset, RunConfig(), use_gateway=True)
    assert set(rep.static) == {"R@1", "R@5", "MRR@3", "MRR@5"}
