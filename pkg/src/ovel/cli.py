"""``ovel`` command line."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from ovel.dataset_io import (
    MANIFEST_NAME,
    load_dataset,
    load_knowledge_base,
    load_manifest,
    load_run_config,
    read_trace,
)
from ovel.datamodel import PredictionTrace
from ovel.embedding import fuse, make_embedder
from ovel.errors import OvelError
from ovel.evaluator import MetricsReport, RofaParams, evaluate_traces
from ovel.pipeline import Variant, run_benchmark, run_static
from ovel.retrieval import build_index, top_k
from ovel.synthgen import generate


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, ensure_ascii=False))


def cmd_validate(args: argparse.Namespace) -> int:
    root = Path(args.data)
    problems: list[str] = []
    try:
        manifest = load_manifest(root / MANIFEST_NAME)
        kb = load_knowledge_base(root / manifest.kb_path, manifest)
    except (OvelError, OSError) as exc:
        print(f"invalid: {exc}")
        return 1
    dataset = load_dataset(root)
    for vid in manifest.video_ids:
        try:
            dataset.load_stream(vid)
        except (OvelError, OSError) as exc:
            problems.append(f"{vid}: {exc}")
    for p in problems:
        print(p)
    if problems:
        print(f"invalid: {len(problems)} problem(s)")
        return 1
    print(f"ok: {len(kb)} entities, {len(manifest.video_ids)} videos")
    return 0


def _variants(raw: Sequence[str] | None) -> list[Variant]:
    if not raw:
        return [Variant.OURS]
    out = []
    for item in raw:
        out += [Variant(v.strip()) for v in item.split(",") if v.strip()]
    return out


def cmd_run(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    report = run_benchmark(args.data, config, _variants(args.variant), args.out,
                           dump_memory=args.dump_memory)
    summary = {k: {"mean_rofa_x100": v.mean_rofa_x100, "videos": len(v.videos),
                   "faults": v.fault_total, "failed": len(v.failed)}
               for k, v in report.variants.items()}
    _print_json(summary)
    return 0


def _load_traces(root: str) -> dict[str, list[PredictionTrace]]:
    groups: dict[str, list[PredictionTrace]] = {}
    base = Path(root)
    for path in sorted(base.rglob("*.trace.jsonl")):
        variant = path.parent.name if path.parent != base else ""
        groups.setdefault(variant, []).append(read_trace(path))
    if not groups:
        raise OvelError(f"no *.trace.jsonl files under {root}")
    return groups


def _reports(args: argparse.Namespace) -> list[MetricsReport]:
    params = RofaParams(args.w0, args.wn, args.policy)
    return [evaluate_traces(traces, params, args.budget, variant)
            for variant, traces in _load_traces(args.traces).items()]


def cmd_eval(args: argparse.Namespace) -> int:
    out = {}
    for rep in _reports(args):
        out[rep.variant or "traces"] = {
            "mean_rofa_x100": rep.mean_rofa_x100,
            "videos": {v.video_id: round(100 * v.rofa, 2) for v in rep.videos},
        }
    _print_json(out)
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    reports = _reports(args)
    if args.format == "json":
        _print_json([r.to_dict() for r in reports])
        return 0
    for i, rep in enumerate(reports):
        if len(reports) > 1:
            print(f"# {rep.variant}")
        text = rep.latency_csv() if args.latency else rep.rofa_csv()
        sys.stdout.write(text)
    return 0


def cmd_eval_static(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    rep = run_static(args.data, config, use_gateway=args.use_gateway)
    _print_json({k: round(100 * v, 2) for k, v in (rep.static or {}).items()})
    return 0


def cmd_query(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    dataset = load_dataset(args.data)
    index = build_index(dataset.kb, config.alpha_text)
    embedder = make_embedder(config.embedder, dataset.manifest.embedding_dim)
    query = fuse(embedder.embed(args.text), [], config.alpha_text)
    for eid, score in top_k(index, query, args.k).items:
        print(json.dumps({"entity_id": eid, "name": dataset.kb.get(eid).name, "score": round(score, 6)},
                         ensure_ascii=False))
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    path = generate(args.seed, args.videos, args.clips, args.kb, args.dim, args.noise, args.out)
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ovel", description="Online video entity linking harness")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate", help="check a dataset directory")
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("run", help="run the online pipeline over a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--variant", action="append",
                   help="base|ours|ours-minus-m|ours-minus-r; repeat or comma-separate")
    s.add_argument("--out", required=True)
    s.add_argument("--dump-memory", action="store_true")
    s.set_defaults(func=cmd_run)

    for name, func, help_ in (("eval", cmd_eval, "RoFA over trace files"),
                              ("report", cmd_report, "CSV/JSON reports over trace files")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--traces", required=True)
        s.add_argument("--w0", type=float, default=1.0)
        s.add_argument("--wn", type=float, default=0.2)
        s.add_argument("--policy", choices=["exclude", "count_wrong"], default="exclude")
        s.add_argument("--budget", type=float, default=3.78)
        if name == "report":
            s.add_argument("--format", choices=["csv", "json"], default="csv")
            s.add_argument("--latency", action="store_true")
        s.set_defaults(func=func)

    s = sub.add_parser("eval-static", help="whole-video R@K / MRR@K")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--use-gateway", action="store_true",
                   help="summarise transcripts with the backend before embedding")
    s.set_defaults(func=cmd_eval_static)

    s = sub.add_parser("query", help="debug retrieval for a text query")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--text", required=True)
    s.add_argument("-k", type=int, default=10)
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("synth", help="generate a planted-signal dataset")
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--videos", type=int, default=20)
    s.add_argument("--clips", type=int, default=60)
    s.add_argument("--kb", type=int, default=200)
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--noise", type=float, default=0.5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OvelError, OSError, ValueError) as exc:
        print(f"ovel: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
