"""Command line: ``faasfabric run|validate|report``.

``run`` exits 0 only when every violation counter is zero, 1 when any is not,
and 2 on a bad manifest or an I/O failure. A manifest argument that is not an
existing file is looked up among the bundled manifests by name.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from faasfabric import errors
from faasfabric.harness.config import bundled_manifest, load_config
from faasfabric.harness.report import emit_report, read_timeseries, summarize_timeseries
from faasfabric.harness.runner import run_scenario


def _resolve(manifest: str) -> Path:
    path = Path(manifest)
    if path.exists() or path.suffix:
        return path
    return bundled_manifest(manifest)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="faasfabric", description="Run dataplane scenarios.")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario manifest")
    run.add_argument("manifest", help="path to a JSON manifest, or a bundled name (echo, fairness, chain, ingress)")
    run.add_argument("--mode", choices=["sim", "socket"], default=None, help="override the manifest backend")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--scheduler", choices=["dwrr", "fcfs"], default=None)
    run.add_argument("--trace", action="store_true", help="also write trace.jsonl of fabric operations")
    run.add_argument("--out", default=None, help="directory for report files")
    val = sub.add_parser("validate", help="check a manifest without running it")
    val.add_argument("manifest")
    rep = sub.add_parser("report", help="summarize a timeseries CSV")
    rep.add_argument("csv")
    return p


def _plural(n: int, noun: str) -> str:
    return f"{n} {noun}" if n == 1 else f"{n} {noun}s"


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "validate":
            cfg = load_config(_resolve(args.manifest))
            counts = ", ".join(_plural(len(v), k) for k, v in
                               (("node", cfg.nodes), ("tenant", cfg.tenants), ("function", cfg.functions)))
            print(f"ok: {cfg.name} ({counts})")
            return 0
        if args.command == "report":
            try:
                rows = read_timeseries(args.csv)
            except ValueError as exc:
                print(f"error: {exc}", file=sys.stderr)
                return 2
            print(json.dumps(summarize_timeseries(rows), indent=2))
            return 0
        cfg = load_config(_resolve(args.manifest))
        result = run_scenario(cfg, backend=args.mode, seed=args.seed, scheduler=args.scheduler,
                              trace=args.trace)
        if args.out:
            for kind, path in emit_report(result, args.out).items():
                print(f"wrote {kind}: {path}", file=sys.stderr)
        summary = {k: v for k, v in result.summary.items() if k not in ("engines", "counters")}
        print(json.dumps(summary, indent=2, sort_keys=True))
    except errors.ConfigInvalid as exc:
        print(f"invalid manifest: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    bad = {k: v for k, v in result.summary.get("violations", {}).items() if v}
    if bad:
        print(f"violations: {bad}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
