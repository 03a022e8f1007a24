"""Online loop (warm-up, strided inference, replication), benchmark and static runs."""

from __future__ import annotations

import json
import logging
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from ovel.dataset_io import Dataset, load_dataset, write_trace
from ovel.datamodel import (
    CandidateSet,
    ClipStream,
    KnowledgeBase,
    MemoryBlock,
    PredictionTrace,
    RunConfig,
    TraceRecord,
)
from ovel.embedding import TextEmbedder, fuse, make_embedder
from ovel.errors import EmptyInput, NoSignal, OvelError, ZeroVector
from ovel.evaluator import MetricsReport, RofaParams, evaluate_traces, static_metrics
from ovel.gateway import Gateway, PromptTemplate, load_templates, make_gateway
from ovel.linker import link, memory_query
from ovel.memory import fallback_memory, init_memory, join_transcripts, summarize, update_memory
from ovel.retrieval import KbIndex, build_index, top_k

log = logging.getLogger(__name__)


class Variant(str, Enum):
    BASE = "base"
    OURS_MINUS_M = "ours-minus-m"
    OURS_MINUS_R = "ours-minus-r"
    OURS = "ours"


def event_indices(n_clips: int, warmup: int, stride: int) -> list[int]:
    """0-based clip indices at which inference runs."""
    if n_clips < 1:
        return []
    if n_clips < warmup:
        return [n_clips - 1]
    return list(range(warmup - 1, n_clips, stride))


@dataclass(frozen=True)
class EventLog:
    clip_index: int
    predicted_entity_id: str
    latency_s: float
    prompt_chars: Mapping[str, int]
    memory: MemoryBlock | None
    candidates: CandidateSet | None


@dataclass
class Engine:
    """Everything a stream run needs besides the stream itself."""

    kb: KnowledgeBase
    index: KbIndex
    gateway: Gateway
    embedder: TextEmbedder
    config: RunConfig
    templates: Mapping[str, PromptTemplate] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.templates:
            self.templates = load_templates(self.config.templates_dir)

    @classmethod
    def from_dataset(cls, dataset: Dataset, config: RunConfig,
                     gateway: Gateway | None = None) -> Engine:
        return cls(
            kb=dataset.kb,
            index=build_index(dataset.kb, config.alpha_text),
            gateway=gateway or make_gateway(config.backend, dataset.kb),
            embedder=make_embedder(config.embedder, dataset.manifest.embedding_dim),
            config=config,
        )

    @property
    def simulated_timing(self) -> bool:
        if self.config.timing == "auto":
            return self.gateway.simulated
        return self.config.timing == "simulated"

    def text_query(self, text: str, images: Sequence) -> CandidateSet:
        emb = self.embedder.embed(text) if text.strip() else None
        if emb is not None and emb.norm() == 0:
            emb = None
        if emb is None and not images:
            raise NoSignal("silent window without keyframes")
        try:
            query = fuse(emb, list(images), self.config.alpha_text)
        except ZeroVector as exc:
            raise NoSignal(str(exc)) from exc
        return top_k(self.index, query, 1)


def run_stream(stream: ClipStream, engine: Engine, variant: Variant | str,
               events: list[EventLog] | None = None) -> PredictionTrace:
    """Link one stream online and return its per-clip prediction trace.

    Records start at the first inference event; clips between events copy
    the latest event's prediction.
    """
    variant = Variant(variant)
    cfg = engine.config
    stride = cfg.base_stride if variant is Variant.BASE else cfg.stride_clips
    schedule = event_indices(len(stream), cfg.warmup_clips, stride)
    clips = stream.clips
    transcripts = [c.transcript for c in clips]
    faults: Counter = Counter()
    tpl = engine.templates

    predicted = ""
    mem: MemoryBlock | None = None
    ready = False
    prev = -1
    at_event: dict[int, tuple[str, float]] = {}

    for t in schedule:
        window = clips[prev + 1:t + 1]
        window_texts = [c.transcript for c in window]
        window_text = join_transcripts(window_texts)
        images = [e for c in window for e in c.keyframe_embeddings]
        candidates = None
        started = time.perf_counter()
        with engine.gateway.capture() as calls:
            try:
                if variant is Variant.BASE:
                    candidates = engine.text_query(window_text, images)
                    predicted = candidates.ids[0]
                else:
                    if variant is Variant.OURS_MINUS_M:
                        mem = init_memory(transcripts[:t + 1], engine.gateway, cfg, tpl, faults)
                    elif not ready:
                        fresh = summarize(window_texts, engine.gateway, cfg, tpl, faults)
                        if fresh is None:
                            mem = fallback_memory(window_texts, cfg)
                        else:
                            mem, ready = fresh, bool(window_text)
                    else:
                        assert mem is not None
                        guidance = None
                        if variant is Variant.OURS:
                            try:
                                q = memory_query(mem, images, engine.embedder, cfg.alpha_text)
                                guidance = top_k(engine.index, q, cfg.k_candidates)
                            except NoSignal:
                                guidance = None
                        mem = update_memory(mem, window_text, guidance, engine.kb,
                                            engine.gateway, cfg, tpl, faults)
                    predicted, candidates = link(mem, images, engine.index, engine.kb,
                                                 engine.gateway, cfg, engine.embedder, tpl, faults)
            except NoSignal:
                faults["no_signal"] += 1
        wall = time.perf_counter() - started
        if engine.simulated_timing:
            latency = sum(c.simulated_s or 0.0 for c in calls)
        else:
            latency = wall
        latency = round(latency, 6)
        at_event[t] = (predicted, latency)
        if events is not None:
            chars: Counter = Counter()
            for c in calls:
                chars[c.purpose] += c.prompt_chars
            events.append(EventLog(t, predicted, latency, dict(chars), mem, candidates))
        prev = t

    records = []
    current = ""
    for idx in range(schedule[0], len(clips)):
        if idx in at_event:
            current, latency = at_event[idx]
            records.append(TraceRecord(idx, current, True, latency))
        else:
            records.append(TraceRecord(idx, current, False, 0.0))
    counted = sum(v for k, v in faults.items() if k not in ("skipped_lines", "no_signal"))
    return PredictionTrace(stream.video_id, stream.ground_truth_entity_id, tuple(records), counted)


@dataclass
class BenchmarkReport:
    variants: dict[str, MetricsReport] = field(default_factory=dict)
    failed: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "variants": {k: v.to_dict() for k, v in self.variants.items()},
            "failed": dict(self.failed),
        }


def _memory_dump_lines(events: Iterable[EventLog]) -> str:
    lines = []
    for ev in events:
        if ev.memory is None:
            continue
        lines.append(json.dumps({
            "clip_index": ev.clip_index,
            "format": ev.memory.format.value,
            "entries": [list(e) for e in ev.memory.entries],
        }, ensure_ascii=False))
    return "".join(line + "\n" for line in lines)


def run_benchmark(dataset_dir: str | Path, config: RunConfig,
                  variants: Sequence[Variant | str] = (Variant.OURS,),
                  out_dir: str | Path | None = None, dump_memory: bool = False,
                  gateway: Gateway | None = None) -> BenchmarkReport:
    """Run every video under every variant; write traces and reports to ``out_dir``.

    A video that cannot be loaded or run is recorded in ``failed`` and the
    rest of the batch continues.
    """
    dataset = load_dataset(dataset_dir)
    engine = Engine.from_dataset(dataset, config, gateway)
    params = RofaParams(config.w0, config.wn, config.rofa_pre_warmup_policy)
    out = Path(out_dir) if out_dir is not None else None
    report = BenchmarkReport()

    streams: dict[str, ClipStream] = {}
    for vid in dataset.manifest.video_ids:
        try:
            streams[vid] = dataset.load_stream(vid)
        except (OvelError, OSError) as exc:
            log.warning("skipping video %s: %s", vid, exc)
            report.failed[vid] = f"{type(exc).__name__}: {exc}"

    for variant in map(Variant, variants):
        vdir = None
        if out is not None:
            vdir = out / variant.value
            vdir.mkdir(parents=True, exist_ok=True)

        def one(vid: str) -> tuple[str, PredictionTrace | None, str | None]:
            events: list[EventLog] = []
            try:
                trace = run_stream(streams[vid], engine, variant, events)
                if vdir is not None:
                    write_trace(trace, vdir / f"{vid}.trace.jsonl")
                    if dump_memory:
                        (vdir / f"{vid}.memory.jsonl").write_text(
                            _memory_dump_lines(events), encoding="utf-8")
                return vid, trace, None
            except OvelError as exc:
                log.warning("video %s failed under %s: %s", vid, variant.value, exc)
                return vid, None, f"{type(exc).__name__}: {exc}"

        with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
            results = list(pool.map(one, list(streams)))
        traces = [tr for _, tr, _ in results if tr is not None]
        metrics = evaluate_traces(traces, params, config.budget_s, variant.value)
        metrics.failed = {vid: err for vid, _, err in results if err is not None}
        metrics.failed.update(report.failed)
        report.variants[variant.value] = metrics
        if vdir is not None:
            (vdir / "report.csv").write_text(metrics.rofa_csv(), encoding="utf-8")
            (vdir / "latency.csv").write_text(metrics.latency_csv(), encoding="utf-8")

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n",
                                         encoding="utf-8")
    return report


def rank_entities(index: KbIndex, query) -> list[str]:
    return top_k(index, query, len(index)).ids


def run_static(dataset_dir: str | Path, config: RunConfig, use_gateway: bool = False,
               gateway: Gateway | None = None) -> MetricsReport:
    """Whole-video linking: one query per video from all transcripts and keyframes.

    With ``use_gateway`` the transcript is summarised first; otherwise the
    raw transcript is embedded directly.
    """
    dataset = load_dataset(dataset_dir)
    if not dataset.manifest.video_ids:
        raise EmptyInput("dataset lists no videos")
    engine = Engine.from_dataset(dataset, config, gateway)
    ranked_lists: list[list[str]] = []
    gts: list[str] = []
    failed: dict[str, str] = {}
    for vid in dataset.manifest.video_ids:
        try:
            stream = dataset.load_stream(vid)
        except (OvelError, OSError) as exc:
            failed[vid] = f"{type(exc).__name__}: {exc}"
            continue
        transcripts = [c.transcript for c in stream.clips]
        images = [e for c in stream.clips for e in c.keyframe_embeddings]
        if use_gateway:
            text = init_memory(transcripts, engine.gateway, config, engine.templates).serialize()
        else:
            text = join_transcripts(transcripts)
        try:
            emb = engine.embedder.embed(text) if text.strip() else None
            if emb is not None and emb.norm() == 0:
                emb = None
            query = fuse(emb, images, config.alpha_text)
            ranked = rank_entities(engine.index, query)
        except (NoSignal, ZeroVector, OvelError) as exc:
            log.info("video %s has no usable query: %s", vid, exc)
            ranked = []
        ranked_lists.append(ranked)
        gts.append(stream.ground_truth_entity_id)
    if not ranked_lists:
        raise EmptyInput("no video could be loaded")
    return MetricsReport(variant="static", static=static_metrics(ranked_lists, gts), failed=failed)
