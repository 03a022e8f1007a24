"""Shared value types and their invariants.

Every type here is a frozen dataclass and performs no checking at
construction time; :func:`validate` reports violations as data so that
loaders can decide whether to refuse a value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from enum import Enum
from functools import cached_property, singledispatch
from typing import Any, Iterable, Literal, Mapping, Sequence

import numpy as np

from ovel.errors import InvalidParams

SCORE_SLACK = 1e-6

PreWarmupPolicy = Literal["exclude", "count_wrong"]
PRE_WARMUP_POLICIES = ("exclude", "count_wrong")


@dataclass(frozen=True)
class Embedding:
    values: tuple[float, ...]

    @classmethod
    def from_array(cls, values: Iterable[float] | np.ndarray) -> Embedding:
        arr = np.asarray(values, dtype=np.float64).ravel()
        return cls(tuple(arr.tolist()))

    @classmethod
    def float32(cls, values: Iterable[float] | np.ndarray) -> Embedding:
        """Build an embedding whose components are rounded to 32-bit floats."""
        arr = np.asarray(values, dtype=np.float32).ravel()
        return cls(tuple(float(x) for x in arr.tolist()))

    @property
    def dim(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))


@dataclass(frozen=True)
class Clip:
    index: int
    start_s: float
    end_s: float
    transcript: str = ""
    keyframe_embeddings: tuple[Embedding, ...] = ()

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


@dataclass(frozen=True)
class ClipStream:
    video_id: str
    ground_truth_entity_id: str
    clips: tuple[Clip, ...]

    def __len__(self) -> int:
        return len(self.clips)


@dataclass(frozen=True)
class DatasetManifest:
    embedding_dim: int
    video_ids: tuple[str, ...] = ()
    kb_path: str = "kb.jsonl"
    notes: str = ""


@dataclass(frozen=True)
class Entity:
    entity_id: str
    name: str
    text_embedding: Embedding
    brand: str | None = None
    category: str | None = None
    attributes: Mapping[str, str] = field(default_factory=dict)
    image_embedding: Embedding | None = None

    def display(self) -> str:
        """Name plus brand and category, as shown to the disambiguation prompt."""
        extra = [x for x in (self.brand, self.category) if x]
        return f"{self.name} [{', '.join(extra)}]" if extra else self.name


@dataclass(frozen=True)
class KnowledgeBase:
    entities: tuple[Entity, ...]
    manifest: DatasetManifest

    @cached_property
    def by_id(self) -> dict[str, Entity]:
        return {e.entity_id: e for e in self.entities}

    def get(self, entity_id: str) -> Entity:
        return self.by_id[entity_id]

    def __contains__(self, entity_id: object) -> bool:
        return entity_id in self.by_id

    def __len__(self) -> int:
        return len(self.entities)


class MemoryFormat(str, Enum):
    STRUCT = "Struct"
    SEMI_STRUCT = "SemiStruct"
    FREE_TEXT = "FreeText"


@dataclass(frozen=True)
class MemoryBlock:
    entries: tuple[tuple[str, str], ...] = ()
    format: MemoryFormat = MemoryFormat.STRUCT
    char_budget: int = 1200

    def serialize(self) -> str:
        if self.format is MemoryFormat.STRUCT:
            return "\n".join(f"{k}: {v}" for k, v in self.entries)
        if self.format is MemoryFormat.SEMI_STRUCT:
            if not self.entries:
                return ""
            product = ""
            attrs = []
            for k, v in self.entries:
                if k == "product_name" and not product:
                    product = v
                else:
                    attrs.append(f"{k}={v}")
            return f"product_name: {product}; attributes: {', '.join(attrs)}"
        return "\n".join(v for _, v in self.entries)

    def is_empty(self) -> bool:
        return not self.serialize().strip()

    def get(self, name: str) -> str | None:
        for k, v in self.entries:
            if k == name:
                return v
        return None


@dataclass(frozen=True)
class CandidateSet:
    items: tuple[tuple[str, float], ...]
    k: int

    @property
    def ids(self) -> list[str]:
        return [eid for eid, _ in self.items]

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class TraceRecord:
    clip_index: int
    predicted_entity_id: str
    inference_event: bool
    latency_s: float = 0.0


@dataclass(frozen=True)
class PredictionTrace:
    video_id: str
    ground_truth_entity_id: str
    records: tuple[TraceRecord, ...]
    faults: int = 0


@dataclass(frozen=True)
class BackendSpec:
    kind: Literal["scripted", "http_chat"] = "scripted"
    endpoint: str = "http://localhost:8000/v1"
    model: str = "chat-model"
    timeout_ms: int = 30000
    max_retries: int = 1
    temperature: float = 0.0
    max_concurrency: int = 4
    # scripted backend only: attribute -> rule, None derives lexicons from the KB
    vocabulary: Mapping[str, Any] | None = None
    sim_base_s: float = 0.05
    sim_s_per_char: float = 3e-4


@dataclass(frozen=True)
class EmbedderSpec:
    kind: Literal["deterministic_hash", "precomputed_lookup", "remote_service"] = (
        "deterministic_hash"
    )
    dim: int | None = None
    endpoint: str | None = None
    lookup_path: str | None = None
    timeout_ms: int = 30000


@dataclass(frozen=True)
class RunConfig:
    k_candidates: int = 10
    warmup_clips: int = 10
    stride_clips: int = 5
    base_stride: int = 1
    alpha_text: float = 0.7
    w0: float = 1.0
    wn: float = 0.2
    memory_cap_chars: int = 1200
    budget_s: float = 3.78
    memory_format: MemoryFormat = MemoryFormat.STRUCT
    rofa_pre_warmup_policy: PreWarmupPolicy = "exclude"
    timing: Literal["auto", "wall", "simulated"] = "auto"
    parallelism: int = 1
    templates_dir: str | None = None
    backend: BackendSpec = field(default_factory=BackendSpec)
    embedder: EmbedderSpec = field(default_factory=EmbedderSpec)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidParams(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "backend" in kwargs:
            kwargs["backend"] = _sub_spec(BackendSpec, kwargs["backend"], "backend")
        if "embedder" in kwargs:
            kwargs["embedder"] = _sub_spec(EmbedderSpec, kwargs["embedder"], "embedder")
        if "memory_format" in kwargs:
            try:
                kwargs["memory_format"] = MemoryFormat(kwargs["memory_format"])
            except ValueError as exc:
                raise InvalidParams(str(exc)) from exc
        config = cls(**kwargs)
        problems = validate(config)
        if problems:
            raise InvalidParams("; ".join(map(str, problems)))
        return config

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, (BackendSpec, EmbedderSpec)):
                value = {g.name: getattr(value, g.name) for g in fields(value)}
                if value.get("vocabulary") is not None:
                    value["vocabulary"] = dict(value["vocabulary"])
            elif isinstance(value, MemoryFormat):
                value = value.value
            out[f.name] = value
        return out


def _sub_spec(cls: type, data: Any, where: str) -> Any:
    if isinstance(data, cls):
        return data
    if not isinstance(data, Mapping):
        raise InvalidParams(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise InvalidParams(f"unknown {where} keys: {sorted(unknown)}")
    return cls(**data)


# -- validation --------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}" if self.path else self.message


def _join(prefix: str, path: str) -> str:
    if not prefix:
        return path
    if not path:
        return prefix
    return f"{prefix}{path}" if path.startswith("[") else f"{prefix}.{path}"


def _nest(prefix: str, problems: Sequence[Violation]) -> list[Violation]:
    return [Violation(_join(prefix, p.path), p.message) for p in problems]


@singledispatch
def validate(value: Any, **context: Any) -> list[Violation]:
    """Return every violated invariant of ``value``; an empty list means ok."""
    raise TypeError(f"no validator for {type(value).__name__}")


@validate.register
def _(value: Embedding, *, dim: int | None = None, **_: Any) -> list[Violation]:
    out = []
    if value.dim < 1:
        out.append(Violation("dim", "dim must be positive"))
    for i, x in enumerate(value.values):
        if not math.isfinite(x):
            out.append(Violation(f"values[{i}]", "non-finite component"))
    if dim is not None and value.dim != dim:
        out.append(Violation("dim", f"dim {value.dim} != manifest dim {dim}"))
    return out


@validate.register
def _(value: Clip, *, dim: int | None = None, **_: Any) -> list[Violation]:
    out = []
    if value.index < 0:
        out.append(Violation("index", "negative clip index"))
    if not (math.isfinite(value.start_s) and math.isfinite(value.end_s)):
        out.append(Violation("start_s", "non-finite timestamp"))
    elif not 0 <= value.start_s <= value.end_s:
        out.append(Violation("start_s", "requires 0 <= start_s <= end_s"))
    for i, emb in enumerate(value.keyframe_embeddings):
        out += _nest(f"keyframe_embeddings[{i}]", validate(emb, dim=dim))
    return out


@validate.register
def _(value: ClipStream, *, dim: int | None = None, **_: Any) -> list[Violation]:
    out = []
    if not value.video_id:
        out.append(Violation("video_id", "empty video_id"))
    if not value.clips:
        out.append(Violation("clips", "stream has no clips"))
    for pos, clip in enumerate(value.clips):
        if clip.index != pos:
            out.append(Violation(f"clips[{pos}].index", f"expected index {pos}, got {clip.index}"))
        out += _nest(f"clips[{pos}]", validate(clip, dim=dim))
    return out


@validate.register
def _(value: DatasetManifest, **_: Any) -> list[Violation]:
    out = []
    if not isinstance(value.embedding_dim, int) or value.embedding_dim < 1:
        out.append(Violation("embedding_dim", "embedding_dim must be >= 1"))
    if len(set(value.video_ids)) != len(value.video_ids):
        out.append(Violation("video_ids", "video_ids are not unique"))
    return out


@validate.register
def _(value: Entity, *, dim: int | None = None, **_: Any) -> list[Violation]:
    out = []
    if not value.entity_id:
        out.append(Violation("entity_id", "empty entity_id"))
    out += _nest("text_embedding", validate(value.text_embedding, dim=dim))
    if value.image_embedding is not None:
        out += _nest("image_embedding", validate(value.image_embedding, dim=dim))
    return out


@validate.register
def _(value: KnowledgeBase, **_: Any) -> list[Violation]:
    out = _nest("manifest", validate(value.manifest))
    if not value.entities:
        out.append(Violation("entities", "knowledge base is empty"))
    seen: set[str] = set()
    dim = value.manifest.embedding_dim
    for i, ent in enumerate(value.entities):
        if ent.entity_id in seen:
            out.append(Violation(f"entities[{i}].entity_id", f"duplicate id {ent.entity_id!r}"))
        seen.add(ent.entity_id)
        out += _nest(f"entities[{i}]", validate(ent, dim=dim))
    return out


@validate.register
def _(value: MemoryBlock, **_: Any) -> list[Violation]:
    out = []
    if value.char_budget < 1:
        out.append(Violation("char_budget", "char_budget must be positive"))
    names: set[str] = set()
    for i, (name, _v) in enumerate(value.entries):
        if not name:
            out.append(Violation(f"entries[{i}]", "empty attribute name"))
        if value.format is MemoryFormat.STRUCT and name in names:
            out.append(Violation(f"entries[{i}]", f"duplicate attribute {name!r}"))
        names.add(name)
    size = len(value.serialize())
    if size > value.char_budget:
        out.append(Violation("entries", f"serialized length {size} exceeds budget {value.char_budget}"))
    return out


@validate.register
def _(value: CandidateSet, **_: Any) -> list[Violation]:
    out = []
    if value.k < 1:
        out.append(Violation("k", "k must be positive"))
    if len(value.items) > value.k:
        out.append(Violation("items", f"{len(value.items)} items exceed k={value.k}"))
    ids = [eid for eid, _ in value.items]
    if len(set(ids)) != len(ids):
        out.append(Violation("items", "duplicate entity_id"))
    scores = [s for _, s in value.items]
    for i, s in enumerate(scores):
        if not math.isfinite(s) or not -1 - SCORE_SLACK <= s <= 1 + SCORE_SLACK:
            out.append(Violation(f"items[{i}]", f"score {s} outside [-1, 1]"))
    if any(b > a for a, b in zip(scores, scores[1:])):
        out.append(Violation("items", "scores not non-increasing"))
    return out


@validate.register
def _(value: PredictionTrace, **_: Any) -> list[Violation]:
    out = []
    if not value.records:
        out.append(Violation("records", "trace has no records"))
    if value.faults < 0:
        out.append(Violation("faults", "negative fault count"))
    last_index: int | None = None
    last_event: str | None = None
    for i, rec in enumerate(value.records):
        path = f"records[{i}]"
        if last_index is not None and rec.clip_index <= last_index:
            out.append(Violation(f"{path}.clip_index", "clip_index not strictly increasing"))
        last_index = rec.clip_index
        if not math.isfinite(rec.latency_s) or rec.latency_s < 0:
            out.append(Violation(f"{path}.latency_s", "latency must be a non-negative number"))
        if rec.inference_event:
            last_event = rec.predicted_entity_id
        elif last_event is None:
            out.append(Violation(path, "replicated record precedes any inference event"))
        elif rec.predicted_entity_id != last_event:
            out.append(Violation(path, "replicated record does not copy the preceding event"))
    return out


@validate.register
def _(value: RunConfig, **_: Any) -> list[Violation]:
    out = []
    if not value.w0 > value.wn > 0:
        out.append(Violation("w0", "requires w0 > wn > 0"))
    for name in ("warmup_clips", "stride_clips", "base_stride", "k_candidates",
                 "memory_cap_chars", "parallelism"):
        if getattr(value, name) < 1:
            out.append(Violation(name, f"{name} must be >= 1"))
    if not 0.0 <= value.alpha_text <= 1.0:
        out.append(Violation("alpha_text", "alpha_text must lie in [0, 1]"))
    if not value.budget_s > 0:
        out.append(Violation("budget_s", "budget_s must be positive"))
    if value.rofa_pre_warmup_policy not in PRE_WARMUP_POLICIES:
        out.append(Violation("rofa_pre_warmup_policy", f"unknown policy {value.rofa_pre_warmup_policy!r}"))
    if value.timing not in ("auto", "wall", "simulated"):
        out.append(Violation("timing", f"unknown timing mode {value.timing!r}"))
    if value.backend.kind not in ("scripted", "http_chat"):
        out.append(Violation("backend.kind", f"unknown backend kind {value.backend.kind!r}"))
    if value.backend.timeout_ms <= 0:
        out.append(Violation("backend.timeout_ms", "timeout_ms must be > 0"))
    if value.backend.max_retries < 0:
        out.append(Violation("backend.max_retries", "max_retries must be >= 0"))
    if value.backend.max_concurrency < 1:
        out.append(Violation("backend.max_concurrency", "max_concurrency must be >= 1"))
    if value.embedder.kind not in ("deterministic_hash", "precomputed_lookup", "remote_service"):
        out.append(Violation("embedder.kind", f"unknown embedder kind {value.embedder.kind!r}"))
    if value.embedder.dim is not None and value.embedder.dim < 1:
        out.append(Violation("embedder.dim", "dim must be >= 1"))
    return out
