from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from ovel.datamodel import (
    Clip,
    ClipStream,
    DatasetManifest,
    Embedding,
    Entity,
    KnowledgeBase,
    PredictionTrace,
    TraceRecord,
)
from ovel.embedding import embed_text_deterministic
from ovel.synthgen import generate


def unit(i: int, dim: int) -> Embedding:
    v = np.zeros(dim)
    v[i] = 1.0
    return Embedding.from_array(v)


def make_kb(names: dict[str, str], dim: int = 64, **extra) -> KnowledgeBase:
    """KB whose text embeddings hash the entity names."""
    ents = []
    for eid, name in names.items():
        brand = name.split()[0]
        ents.append(Entity(eid, name, embed_text_deterministic(name, dim), brand=brand, **extra))
    return KnowledgeBase(tuple(ents), DatasetManifest(dim, (), "kb.jsonl", ""))


def make_stream(texts: list[str], gt: str = "e1", video_id: str = "v1",
                frames: dict[int, list[Embedding]] | None = None) -> ClipStream:
    frames = frames or {}
    clips = tuple(
        Clip(i, 3.0 * i, 3.0 * i + 3.0, t, tuple(frames.get(i, ())))
        for i, t in enumerate(texts)
    )
    return ClipStream(video_id, gt, clips)


def replicated_trace(preds_at_events: list[tuple[int, str]], end: int, gt: str = "e1",
                     video_id: str = "v1") -> PredictionTrace:
    events = dict(preds_at_events)
    start = min(events)
    recs = []
    cur = ""
    for i in range(start, end + 1):
        if i in events:
            cur = events[i]
            recs.append(TraceRecord(i, cur, True, 0.5))
        else:
            recs.append(TraceRecord(i, cur, False, 0.0))
    return PredictionTrace(video_id, gt, tuple(recs))


@pytest.fixture(scope="session")
def synth_clean(tmp_path_factory) -> Path:
    return generate(1, 4, 30, 60, 64, 0.0, tmp_path_factory.mktemp("clean"))


@pytest.fixture(scope="session")
def synth_noisy(tmp_path_factory) -> Path:
    return generate(3, 4, 40, 60, 64, 0.5, tmp_path_factory.mktemp("noisy"))


def write_dataset(root: Path, kb: KnowledgeBase, streams: list[ClipStream],
                  extra_video_ids: tuple[str, ...] = ()) -> Path:
    from ovel.dataset_io import write_clip_stream, write_knowledge_base, write_manifest

    ids = tuple(s.video_id for s in streams) + extra_video_ids
    manifest = DatasetManifest(kb.manifest.embedding_dim, ids, "kb.jsonl", "")
    (root / "videos").mkdir(parents=True, exist_ok=True)
    write_manifest(manifest, root / "manifest.json")
    write_knowledge_base(KnowledgeBase(kb.entities, manifest), root / "kb.jsonl")
    for s in streams:
        write_clip_stream(s, root / "videos" / f"{s.video_id}.json")
    return root


ACCEPTANCE: list[tuple[str, bool, str]] = []


def record_acceptance(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE.append((name, ok, detail))
    assert ok, f"{name}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
