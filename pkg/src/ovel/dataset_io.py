"""On-disk formats: manifest, knowledge base, clip streams, traces, run config.

Layout of a dataset directory::

    manifest.json          {"embedding_dim", "video_ids", "kb_path", "notes"}
    kb.jsonl               one entity per line
    videos/<video_id>.json one clip stream per file

Trace files are JSON Lines: a header object carrying ``video_id``,
``ground_truth_entity_id`` and ``faults``, followed by one record per line.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Iterator

from ovel.datamodel import (
    Clip,
    ClipStream,
    DatasetManifest,
    Embedding,
    Entity,
    KnowledgeBase,
    PredictionTrace,
    RunConfig,
    TraceRecord,
    validate,
)
from ovel.errors import DimMismatch, DuplicateId, InvalidData, NonContiguousIndices, ParseError

MANIFEST_NAME = "manifest.json"
VIDEOS_DIR = "videos"
BACKEND_URL_ENV = "OVEL_BACKEND_URL"

__all__ = [
    "Dataset",
    "DatasetManifest",
    "load_clip_stream",
    "load_dataset",
    "load_knowledge_base",
    "load_manifest",
    "load_run_config",
    "read_trace",
    "stream_clips",
    "write_clip_stream",
    "write_knowledge_base",
    "write_manifest",
    "write_trace",
]


def _dumps(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(", ", ": "))


def _field(obj: dict, key: str, types: type | tuple[type, ...], path: str,
           line_no: int | None, optional: bool = False) -> Any:
    if key not in obj:
        if optional:
            return None
        raise ParseError(path, line_no, f"missing field {key!r}")
    value = obj[key]
    if value is None and optional:
        return None
    # bool is an int subclass; never accept it where a number is expected
    if isinstance(value, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise ParseError(path, line_no, f"field {key!r} has wrong type")
    if not isinstance(value, types):
        raise ParseError(path, line_no, f"field {key!r} has wrong type")
    return value


def _embedding(raw: Any, path: str, line_no: int | None, what: str) -> Embedding:
    if not isinstance(raw, list) or not all(
        isinstance(x, (int, float)) and not isinstance(x, bool) for x in raw
    ):
        raise ParseError(path, line_no, f"{what} must be an array of numbers")
    return Embedding.float32(raw)


def _emb_json(emb: Embedding | None) -> list[float] | None:
    return None if emb is None else list(emb.values)


# -- manifest -----------------------------------------------------------------


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = str(path)
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.lineno, exc.msg) from exc
    if not isinstance(raw, dict):
        raise ParseError(path, None, "manifest must be a JSON object")
    manifest = DatasetManifest(
        embedding_dim=_field(raw, "embedding_dim", int, path, None),
        video_ids=tuple(_field(raw, "video_ids", list, path, None)),
        kb_path=_field(raw, "kb_path", str, path, None),
        notes=_field(raw, "notes", str, path, None, optional=True) or "",
    )
    problems = validate(manifest)
    if problems:
        raise InvalidData(problems)
    return manifest


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    payload = {
        "embedding_dim": manifest.embedding_dim,
        "video_ids": list(manifest.video_ids),
        "kb_path": manifest.kb_path,
        "notes": manifest.notes,
    }
    Path(path).write_text(json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


# -- knowledge base -----------------------------------------------------------


def _parse_entity(obj: Any, path: str, line_no: int) -> Entity:
    if not isinstance(obj, dict):
        raise ParseError(path, line_no, "entity line must be a JSON object")
    attrs = _field(obj, "attributes", dict, path, line_no, optional=True) or {}
    if not all(isinstance(k, str) and isinstance(v, str) for k, v in attrs.items()):
        raise ParseError(path, line_no, "attributes must map text to text")
    image = obj.get("image_embedding")
    return Entity(
        entity_id=_field(obj, "entity_id", str, path, line_no),
        name=_field(obj, "name", str, path, line_no),
        brand=_field(obj, "brand", str, path, line_no, optional=True),
        category=_field(obj, "category", str, path, line_no, optional=True),
        attributes=dict(attrs),
        text_embedding=_embedding(obj.get("text_embedding"), path, line_no, "text_embedding"),
        image_embedding=None if image is None else _embedding(image, path, line_no, "image_embedding"),
    )


def load_knowledge_base(path: str | os.PathLike,
                        manifest: DatasetManifest | None = None) -> KnowledgeBase:
    """Load a JSON Lines knowledge base.

    When ``manifest`` is omitted, ``manifest.json`` next to the file is used.
    """
    path = str(path)
    if manifest is None:
        manifest = load_manifest(Path(path).parent / MANIFEST_NAME)
    dim = manifest.embedding_dim
    entities: list[Entity] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, line_no, exc.msg) from exc
            ent = _parse_entity(obj, path, line_no)
            for emb in (ent.text_embedding, ent.image_embedding):
                if emb is not None and emb.dim != dim:
                    raise DimMismatch(
                        f"{ent.entity_id}: embedding dim {emb.dim} != manifest dim {dim}",
                        entity_id=ent.entity_id,
                    )
            if ent.entity_id in seen:
                raise DuplicateId(ent.entity_id)
            seen.add(ent.entity_id)
            entities.append(ent)
    kb = KnowledgeBase(tuple(entities), manifest)
    problems = validate(kb)
    if problems:
        raise InvalidData(problems)
    return kb


def entity_to_json(ent: Entity) -> dict[str, Any]:
    return {
        "entity_id": ent.entity_id,
        "name": ent.name,
        "brand": ent.brand,
        "category": ent.category,
        "attributes": dict(ent.attributes),
        "text_embedding": _emb_json(ent.text_embedding),
        "image_embedding": _emb_json(ent.image_embedding),
    }


def write_knowledge_base(kb: KnowledgeBase, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ent in kb.entities:
            fh.write(_dumps(entity_to_json(ent)) + "\n")


# -- clip streams -------------------------------------------------------------


def stream_to_json(stream: ClipStream) -> dict[str, Any]:
    return {
        "video_id": stream.video_id,
        "ground_truth_entity_id": stream.ground_truth_entity_id,
        "clips": [
            {
                "index": c.index,
                "start_s": c.start_s,
                "end_s": c.end_s,
                "transcript": c.transcript,
                "keyframe_embeddings": [list(e.values) for e in c.keyframe_embeddings],
            }
            for c in stream.clips
        ],
    }


def load_clip_stream(path: str | os.PathLike, dim: int | None = None) -> ClipStream:
    path = str(path)
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.lineno, exc.msg) from exc
    if not isinstance(raw, dict):
        raise ParseError(path, None, "video file must be a JSON object")
    clips = []
    for pos, c in enumerate(_field(raw, "clips", list, path, None)):
        if not isinstance(c, dict):
            raise ParseError(path, None, f"clips[{pos}] must be an object")
        frames = _field(c, "keyframe_embeddings", list, path, None, optional=True) or []
        clips.append(Clip(
            index=_field(c, "index", int, path, None),
            start_s=float(_field(c, "start_s", (int, float), path, None)),
            end_s=float(_field(c, "end_s", (int, float), path, None)),
            transcript=_field(c, "transcript", str, path, None, optional=True) or "",
            keyframe_embeddings=tuple(
                _embedding(f, path, None, f"clips[{pos}].keyframe_embeddings") for f in frames
            ),
        ))
    clips.sort(key=lambda c: c.index)
    indices = [c.index for c in clips]
    if indices != list(range(len(clips))):
        raise NonContiguousIndices(indices)
    stream = ClipStream(
        video_id=_field(raw, "video_id", str, path, None),
        ground_truth_entity_id=_field(raw, "ground_truth_entity_id", str, path, None),
        clips=tuple(clips),
    )
    problems = validate(stream, dim=dim)
    if problems:
        raise InvalidData(problems)
    return stream


def write_clip_stream(stream: ClipStream, path: str | os.PathLike) -> None:
    Path(path).write_text(_dumps(stream_to_json(stream)) + "\n", encoding="utf-8")


def stream_clips(stream: ClipStream, pace: bool = False,
                 sleep: Callable[[float], None] = time.sleep) -> Iterator[Clip]:
    """Yield clips in index order, optionally pacing delivery in real time.

    With ``pace`` set, each clip is released no earlier than its predecessor's
    release plus the predecessor's duration.
    """
    clock = time.monotonic
    due = clock()
    for clip in stream.clips:
        if pace:
            wait = due - clock()
            if wait > 0:
                sleep(wait)
            due = max(due, clock()) + max(clip.duration_s, 0.0)
        yield clip


# -- traces -------------------------------------------------------------------


def write_trace(trace: PredictionTrace, path: str | os.PathLike) -> None:
    problems = validate(trace)
    if problems:
        raise InvalidData(problems)
    lines = [_dumps({
        "video_id": trace.video_id,
        "ground_truth_entity_id": trace.ground_truth_entity_id,
        "faults": trace.faults,
    })]
    for r in trace.records:
        lines.append(_dumps({
            "clip_index": r.clip_index,
            "predicted_entity_id": r.predicted_entity_id,
            "inference_event": r.inference_event,
            "latency_s": r.latency_s,
        }))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_trace(path: str | os.PathLike) -> PredictionTrace:
    path = str(path)
    header: dict | None = None
    records: list[TraceRecord] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, line_no, exc.msg) from exc
            if not isinstance(obj, dict):
                raise ParseError(path, line_no, "trace line must be a JSON object")
            if header is None:
                if "video_id" not in obj:
                    raise ParseError(path, line_no, "missing trace header line")
                header = obj
                continue
            records.append(TraceRecord(
                clip_index=_field(obj, "clip_index", int, path, line_no),
                predicted_entity_id=_field(obj, "predicted_entity_id", str, path, line_no),
                inference_event=_field(obj, "inference_event", bool, path, line_no),
                latency_s=float(_field(obj, "latency_s", (int, float), path, line_no)),
            ))
    if header is None:
        raise ParseError(path, None, "empty trace file")
    trace = PredictionTrace(
        video_id=_field(header, "video_id", str, path, 1),
        ground_truth_entity_id=_field(header, "ground_truth_entity_id", str, path, 1),
        records=tuple(records),
        faults=_field(header, "faults", int, path, 1, optional=True) or 0,
    )
    problems = validate(trace)
    if problems:
        raise InvalidData(problems)
    return trace


# -- dataset & config ---------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    root: Path
    manifest: DatasetManifest
    kb: KnowledgeBase

    def video_path(self, video_id: str) -> Path:
        return self.root / VIDEOS_DIR / f"{video_id}.json"

    def load_stream(self, video_id: str) -> ClipStream:
        stream = load_clip_stream(self.video_path(video_id), dim=self.manifest.embedding_dim)
        if stream.video_id != video_id:
            raise InvalidData([f"video file {video_id}.json declares video_id {stream.video_id!r}"])
        if stream.ground_truth_entity_id not in self.kb:
            raise InvalidData([f"{video_id}: ground truth {stream.ground_truth_entity_id!r} not in KB"])
        return stream


def load_dataset(root: str | os.PathLike) -> Dataset:
    root = Path(root)
    manifest = load_manifest(root / MANIFEST_NAME)
    kb = load_knowledge_base(root / manifest.kb_path, manifest)
    return Dataset(root, manifest, kb)


def load_run_config(path: str | os.PathLike | None = None) -> RunConfig:
    """Read a JSON run config; ``OVEL_BACKEND_URL`` overrides the backend endpoint."""
    if path is None:
        config = RunConfig()
    else:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(str(path), exc.lineno, exc.msg) from exc
        if not isinstance(raw, dict):
            raise ParseError(str(path), None, "config must be a JSON object")
        config = RunConfig.from_dict(raw)
    url = os.environ.get(BACKEND_URL_ENV)
    if url:
        config = replace(config, backend=replace(config.backend, endpoint=url))
    return config
