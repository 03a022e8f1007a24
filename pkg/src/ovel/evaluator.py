"""RoFA, static retrieval metrics and latency-budget reports."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from ovel.datamodel import PRE_WARMUP_POLICIES, PredictionTrace, PreWarmupPolicy
from ovel.errors import EmptyInput, EmptyTrace, InvalidParams


@dataclass(frozen=True)
class RofaParams:
    w0: float = 1.0
    wn: float = 0.2
    pre_warmup_policy: PreWarmupPolicy = "exclude"

    def __post_init__(self) -> None:
        if not self.w0 > self.wn > 0:
            raise InvalidParams("RoFA weights require w0 > wn > 0")
        if self.pre_warmup_policy not in PRE_WARMUP_POLICIES:
            raise InvalidParams(f"unknown pre-warm-up policy {self.pre_warmup_policy!r}")


def linear_weights(n: int, w0: float = 1.0, wn: float = 0.2) -> list[float]:
    """``n`` weights falling linearly from ``w0`` (first) to ``wn`` (last)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if n == 1:
        return [w0]
    w = [((n - 1 - i) * w0 + i * wn) / (n - 1) for i in range(n)]
    w[-1] = wn
    return w


def scores(trace: PredictionTrace, gt: str | None = None,
           policy: PreWarmupPolicy = "exclude") -> list[int]:
    """Per-record correctness after applying the pre-warm-up policy."""
    gt = trace.ground_truth_entity_id if gt is None else gt
    out = [int(r.predicted_entity_id == gt) for r in trace.records]
    if policy == "count_wrong" and trace.records:
        out = [0] * trace.records[0].clip_index + out
    return out


def rofa(trace: PredictionTrace, gt: str | None = None,
         params: RofaParams = RofaParams()) -> float:
    """Weighted accuracy where earlier predictions weigh more; in [0, 1]."""
    s = scores(trace, gt, params.pre_warmup_policy)
    if not s:
        raise EmptyTrace(f"trace {trace.video_id!r} has no records to score")
    w = linear_weights(len(s), params.w0, params.wn)
    return sum(wi * si for wi, si in zip(w, s)) / sum(w)


def _rank(ranked: Sequence[str], gt: str) -> int | None:
    if len(set(ranked)) != len(ranked):
        raise ValueError("ranked list contains duplicates")
    try:
        return list(ranked).index(gt) + 1
    except ValueError:
        return None


def _check(ranked_lists: Sequence[Sequence[str]], gts: Sequence[str], k: int) -> None:
    if not ranked_lists:
        raise EmptyInput("no queries")
    if len(ranked_lists) != len(gts):
        raise ValueError("ranked_lists and gts differ in length")
    if k < 1:
        raise ValueError("k must be >= 1")


def recall_at_k(ranked_lists: Sequence[Sequence[str]], gts: Sequence[str], k: int) -> float:
    _check(ranked_lists, gts, k)
    hits = 0
    for ranked, gt in zip(ranked_lists, gts):
        r = _rank(ranked, gt)
        hits += r is not None and r <= k
    return hits / len(gts)


def mrr_at_k(ranked_lists: Sequence[Sequence[str]], gts: Sequence[str], k: int) -> float:
    _check(ranked_lists, gts, k)
    total = 0.0
    for ranked, gt in zip(ranked_lists, gts):
        r = _rank(ranked, gt)
        if r is not None and r <= k:
            total += 1.0 / r
    return total / len(gts)


def static_metrics(ranked_lists: Sequence[Sequence[str]], gts: Sequence[str]) -> dict[str, float]:
    return {
        "R@1": recall_at_k(ranked_lists, gts, 1),
        "R@5": recall_at_k(ranked_lists, gts, 5),
        "MRR@3": mrr_at_k(ranked_lists, gts, 3),
        "MRR@5": mrr_at_k(ranked_lists, gts, 5),
    }


@dataclass(frozen=True)
class LatencyBucket:
    bucket_start_clip: int
    mean_latency_s: float
    over_budget: bool
    n_events: int


def latency_report(traces: Iterable[PredictionTrace], budget_s: float = 3.78,
                   bucket_size: int = 5) -> list[LatencyBucket]:
    """Mean inference-event latency per block of ``bucket_size`` clips."""
    sums: dict[int, list[float]] = {}
    for trace in traces:
        for rec in trace.records:
            if rec.inference_event:
                sums.setdefault(rec.clip_index // bucket_size * bucket_size, []).append(rec.latency_s)
    out = []
    for start in sorted(sums):
        vals = sums[start]
        mean = sum(vals) / len(vals)
        out.append(LatencyBucket(start, mean, mean > budget_s, len(vals)))
    return out


@dataclass(frozen=True)
class VideoResult:
    video_id: str
    rofa: float
    n_records: int
    faults: int


@dataclass
class MetricsReport:
    variant: str = ""
    videos: list[VideoResult] = field(default_factory=list)
    static: dict[str, float] | None = None
    latency: list[LatencyBucket] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)

    @property
    def mean_rofa(self) -> float | None:
        if not self.videos:
            return None
        return sum(v.rofa for v in self.videos) / len(self.videos)

    @property
    def mean_rofa_x100(self) -> float | None:
        m = self.mean_rofa
        return None if m is None else round(100.0 * m, 2)

    @property
    def fault_total(self) -> int:
        return sum(v.faults for v in self.videos)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "mean_rofa_x100": self.mean_rofa_x100,
            "videos": [asdict(v) for v in self.videos],
            "static": None if self.static is None else {k: round(100.0 * v, 2) for k, v in self.static.items()},
            "latency": [asdict(b) for b in self.latency],
            "faults": self.fault_total,
            "failed": dict(self.failed),
        }

    def rofa_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["video_id", "rofa", "n_records", "faults"])
        for v in self.videos:
            w.writerow([v.video_id, f"{v.rofa:.6f}", v.n_records, v.faults])
        return buf.getvalue()

    def latency_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bucket_start_clip", "mean_latency_s", "over_budget"])
        for b in self.latency:
            w.writerow([b.bucket_start_clip, f"{b.mean_latency_s:.6f}", str(b.over_budget).lower()])
        return buf.getvalue()


def evaluate_traces(traces: Sequence[PredictionTrace], params: RofaParams = RofaParams(),
                    budget_s: float = 3.78, variant: str = "") -> MetricsReport:
    videos = [
        VideoResult(t.video_id, rofa(t, params=params), len(t.records), t.faults)
        for t in traces
    ]
    return MetricsReport(variant=variant, videos=videos, latency=latency_report(traces, budget_s))
