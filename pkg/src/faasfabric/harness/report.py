"""Report files for a finished run.

``timeseries.csv`` has one row per window per tenant; ``summary.json`` holds the
exit summary; ``metrics.jsonl`` is the full metrics stream (the determinism
check compares it byte for byte). I/O errors propagate to the caller.
"""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

from faasfabric.harness.runner import WINDOW_FIELDS, RunResult


def write_timeseries(rows: list[dict], path: Path) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=WINDOW_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in WINDOW_FIELDS})


def _write_jsonl(records, path: Path) -> None:
    with path.open("w") as fh:
        for rec in records:
            fh.write(rec if isinstance(rec, str) else json.dumps(rec, sort_keys=True))
            fh.write("\n")


def emit_report(result: RunResult, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "timeseries": out / "timeseries.csv",
        "summary": out / "summary.json",
        "metrics": out / "metrics.jsonl",
    }
    write_timeseries(result.windows, files["timeseries"])
    files["summary"].write_text(json.dumps(result.summary, indent=2, sort_keys=True) + "\n")
    _write_jsonl(result.metrics_lines(), files["metrics"])
    if result.autoscaler:
        files["autoscaler"] = out / "autoscaler.jsonl"
        _write_jsonl(result.autoscaler, files["autoscaler"])
    if result.trace:
        files["trace"] = out / "trace.jsonl"
        _write_jsonl(result.trace, files["trace"])
    return files


def read_timeseries(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames) != WINDOW_FIELDS:
            raise ValueError(f"{path}: not a timeseries file (header {reader.fieldnames})")
        rows = []
        for r in reader:
            rows.append({
                "window": int(r["window"]), "start_s": float(r["start_s"]), "tenant": int(r["tenant"]),
                "delivered": int(r["delivered"]), "bytes": int(r["bytes"]), "share": float(r["share"]),
                "mean_latency_ns": int(r["mean_latency_ns"]),
            })
        return rows


def summarize_timeseries(rows: list[dict]) -> dict:
    """Totals per tenant and, over windows where the tenant delivered anything,
    its mean and minimum share."""
    totals: dict[int, dict] = defaultdict(lambda: {"delivered": 0, "bytes": 0, "windows": 0, "shares": []})
    windows = set()
    for r in rows:
        windows.add(r["window"])
        t = totals[r["tenant"]]
        t["delivered"] += r["delivered"]
        t["bytes"] += r["bytes"]
        if r["delivered"]:
            t["windows"] += 1
            t["shares"].append(r["share"])
    out = {}
    for tid, t in sorted(totals.items()):
        shares = t.pop("shares")
        t["mean_share"] = round(sum(shares) / len(shares), 6) if shares else 0.0
        t["min_share"] = min(shares) if shares else 0.0
        out[str(tid)] = t
    return {"windows": len(windows), "tenants": out}
