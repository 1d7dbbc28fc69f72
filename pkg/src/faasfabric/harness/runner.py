"""Scenario execution: build a cluster from a manifest, drive the workload,
collect per-window metrics and a summary."""
from __future__ import annotations

import hashlib
import json
import math
import random
import statistics
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field

from faasfabric.baselines import PrimitiveBench, TransferMode
from faasfabric.clock import NS_PER_S
from faasfabric.dne import EngineConfig, EngineCost, SchedulerMode
from faasfabric.fabric import Backend
from faasfabric.harness.apps import (
    ChainClient,
    ChainService,
    EchoClient,
    EchoServer,
    HopLog,
    HttpLoadClient,
    SimDriver,
    ThreadDriver,
    boutique_graph,
    make_requests,
    reference_response,
)
from faasfabric.harness.cluster import Cluster, TenantSpec
from faasfabric.harness.config import ScenarioConfig
from faasfabric.ingress import AutoscalerConfig, Gateway, SimIngress, WorkerCost

WINDOW_FIELDS = ["window", "start_s", "tenant", "delivered", "bytes", "share", "mean_latency_ns"]


@dataclass
class RunResult:
    config: ScenarioConfig
    windows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    autoscaler: list[dict] = field(default_factory=list)
    messages: list[dict] = field(default_factory=list)
    trace: list[dict] = field(default_factory=list)

    @property
    def violations(self) -> int:
        return sum(self.summary.get("violations", {}).values())

    def metrics_lines(self) -> list[str]:
        """The metrics stream: deterministic for a fixed seed in SIM mode."""
        lines = [json.dumps({"kind": "window", **w}, sort_keys=True) for w in self.windows]
        lines += [json.dumps({"kind": "autoscaler", **a}, sort_keys=True) for a in self.autoscaler]
        lines += [json.dumps({"kind": "message", **m}, sort_keys=True) for m in self.messages]
        lines.append(json.dumps({"kind": "summary", **self.summary}, sort_keys=True))
        return lines


def with_overrides(cfg: ScenarioConfig, backend=None, seed=None, scheduler=None) -> ScenarioConfig:
    update = {}
    if backend is not None:
        update["backend"] = backend.upper()
    if seed is not None:
        update["seed"] = seed
    if scheduler is not None:
        update["scheduler"] = scheduler.upper()
    if not update:
        return cfg
    return ScenarioConfig.model_validate({**cfg.model_dump(), **update})


def colocated(cfg: ScenarioConfig, node: str | None = None) -> ScenarioConfig:
    """Same scenario with every function placed on one node."""
    node = node or cfg.nodes[0].name
    data = cfg.model_dump()
    for f in data["functions"]:
        f["node"] = node
    return ScenarioConfig.model_validate(data)


def _ns(seconds: float) -> int:
    return round(seconds * NS_PER_S)


def build_cluster(cfg: ScenarioConfig, drive: bool = True) -> Cluster:
    engine_configs = {
        n.name: EngineConfig(
            scheduler=SchedulerMode(cfg.scheduler), quantum_base=cfg.quantum_base,
            active_cap=cfg.active_cap, qps_per_peer=cfg.qps_per_peer,
            initial_rq_depth=cfg.initial_rq_depth, cost=EngineCost(**n.engine_cost.model_dump()))
        for n in cfg.nodes}
    tenants = {t.id: TenantSpec(t.weight, t.buffers, t.buffer_size) for t in cfg.tenants}
    return Cluster([n.name for n in cfg.nodes], tenants, backend=Backend[cfg.backend],
                   engine_configs=engine_configs, channel_capacity=cfg.channel_capacity, drive=drive)


def _percentile(values: list[int], q: float) -> int | None:
    if not values:
        return None
    ordered = sorted(values)
    return ordered[min(len(ordered) - 1, math.ceil(q * len(ordered)) - 1)]


# -- fairness analysis ---------------------------------------------------------------------

def tenant_intervals(cfg: ScenarioConfig, duration_s: float) -> dict[int, tuple[float, float]]:
    out: dict[int, tuple[float, float]] = {}
    for c in cfg.clients:
        tid = cfg.function(c.fn_id).tenant
        stop = duration_s if c.stop_s is None else min(c.stop_s, duration_s)
        lo, hi = out.get(tid, (c.start_s, stop))
        out[tid] = (min(lo, c.start_s), max(hi, stop))
    return out


def fairness_summary(windows: list[dict], cfg: ScenarioConfig, duration_s: float) -> dict:
    """Per-window shares among the tenants active for the whole window, away from
    joins and leaves by the settle margin, against their weight entitlement."""
    intervals = tenant_intervals(cfg, duration_s)
    weights = {t.id: t.weight for t in cfg.tenants}
    events = sorted({x for iv in intervals.values() for x in iv})
    margin, w = cfg.settle_margin_s, cfg.window_s
    counts: dict[int, dict[int, int]] = defaultdict(dict)
    for row in windows:
        counts[row["window"]][row["tenant"]] = row["delivered"]
    phases: dict[str, dict] = {}
    worst, min_fraction = 0.0, {}
    for win in sorted(counts):
        ws, we = win * w, (win + 1) * w
        if any(ws - margin < e < we + margin for e in events):
            continue
        active = sorted(t for t, (lo, hi) in intervals.items() if lo <= ws and we <= hi)
        if len(active) < 2:
            continue
        total = sum(counts[win].get(t, 0) for t in active)
        if total == 0:
            continue
        wsum = sum(weights[t] for t in active)
        key = "+".join(str(t) for t in active)
        ph = phases.setdefault(key, {"windows": 0, "shares": defaultdict(list), "max_ratio_error": 0.0,
                                     "expected": {str(t): weights[t] / wsum for t in active}})
        ph["windows"] += 1
        for t in active:
            share = counts[win].get(t, 0) / total
            expected = weights[t] / wsum
            err = abs(share / expected - 1)
            ph["shares"][str(t)].append(share)
            ph["max_ratio_error"] = max(ph["max_ratio_error"], err)
            worst = max(worst, err)
            frac = share / expected
            min_fraction[str(t)] = min(min_fraction.get(str(t), frac), frac)
    for ph in phases.values():
        ph["mean_share"] = {t: round(statistics.fmean(v), 6) for t, v in ph.pop("shares").items()}
        ph["max_ratio_error"] = round(ph["max_ratio_error"], 6)
        ph["expected"] = {t: round(v, 6) for t, v in ph["expected"].items()}
    return {"phases": phases, "ratio_error": round(worst, 6),
            "min_entitlement_fraction": {t: round(v, 6) for t, v in sorted(min_fraction.items())}}


def window_rows(completions: dict[int, list[tuple[int, int, int]]], t0: int, window_ns: int,
                n_windows: int) -> list[dict]:
    """One row per window per tenant from (time, bytes, latency) completion records."""
    buckets: dict[tuple[int, int], list] = defaultdict(list)
    for tid, recs in completions.items():
        for t, nbytes, lat in recs:
            buckets[((t - t0) // window_ns, tid)].append((nbytes, lat))
    rows = []
    for win in range(n_windows):
        total = sum(len(buckets.get((win, tid), ())) for tid in completions)
        for tid in sorted(completions):
            b = buckets.get((win, tid), [])
            rows.append({
                "window": win,
                "start_s": round(win * window_ns / NS_PER_S, 6),
                "tenant": tid,
                "delivered": len(b),
                "bytes": sum(x for x, _ in b),
                "share": round(len(b) / total, 6) if total else 0.0,
                "mean_latency_ns": round(sum(y for _, y in b) / len(b)) if b else 0,
            })
    return rows


# -- scenario kinds --------------------------------------------------------------------------

def run_scenario(cfg: ScenarioConfig, backend: str | None = None, seed: int | None = None,
                 scheduler: str | None = None, trace: bool = False) -> RunResult:
    cfg = with_overrides(cfg, backend, seed, scheduler)
    if cfg.transfer_mode != "TWO_SIDED":
        return run_primitive(cfg)
    if cfg.chain is not None:
        return run_chain_workload(cfg, trace=trace)
    return _run_dataplane(cfg, trace)


def run_primitive(cfg: ScenarioConfig) -> RunResult:
    p = cfg.primitive
    senders = [f"S{i}" for i in range(p.senders)]
    bench = PrimitiveBench(TransferMode(cfg.transfer_mode), senders=senders, receiver="R")
    recs = []
    for i in range(p.messages):
        rec = bench.submit(p.message_size, senders[i % len(senders)])
        bench.run()
        recs.append(rec)
    result = RunResult(cfg)
    for r in recs:
        result.messages.append({"seq": r.seq, "sender": r.sender, "latency_ns": r.latency_ns,
                                "fabric_ops": r.fabric_ops, "copies": r.copies,
                                "poll_discoveries": r.poll_discoveries, "lock_retries": r.lock_retries,
                                "status": r.status, "payload_ok": r.payload_ok})
    ok = [r for r in recs if r.status == "OK"]
    lat = [r.latency_ns for r in ok]
    result.summary = {
        "scenario": cfg.name, "transfer_mode": cfg.transfer_mode, "messages": len(recs),
        "delivered": len(ok),
        "mean_latency_ns": round(statistics.fmean(lat), 3) if lat else None,
        "fabric_ops_per_msg": round(sum(r.fabric_ops for r in ok) / max(len(ok), 1), 6),
        "copies_per_msg": round(sum(r.copies for r in ok) / max(len(ok), 1), 6),
        "counters": bench.counters.snapshot(),
        "violations": {**dict(bench.counters.violations),
                       "corrupt_payload": sum(1 for r in ok if not r.payload_ok)},
    }
    return result


class _Run:
    """Shared assembly for echo/ingress/chain scenarios."""

    def __init__(self, cfg: ScenarioConfig, trace: bool):
        self.cfg = cfg
        self.sim = cfg.backend == "SIM"
        self.cluster = build_cluster(cfg)
        self.trace: list[dict] = []
        if trace:
            self.cluster.fabric.trace_sink = self.trace.append
        self.driver = SimDriver(self.cluster.clock) if self.sim else ThreadDriver()
        self.rng = random.Random(cfg.seed)
        self.apps: dict[int, object] = {}
        self.ctxs = {f.fn_id: self.cluster.add_function(f.fn_id, f.tenant, f.node) for f in cfg.functions}
        self.gateway = None
        self.ingress = None

    def start(self) -> int:
        self.cluster.start()
        if not self.sim:
            for engine in self.cluster.engines.values():
                engine.start_thread()
        for app in self.apps.values():
            self.driver.attach(app)
        return self.cluster.clock.now

    def quiesce(self, limit_ns: int | None = None, wall_timeout: float = 30.0) -> None:
        if self.sim:
            self.cluster.run_until_quiet(limit_ns)
            return
        deadline = time.monotonic() + wall_timeout
        while time.monotonic() < deadline:
            if not any(e.has_pending() for e in self.cluster.engines.values()):
                time.sleep(0.05)
                if not any(e.has_pending() for e in self.cluster.engines.values()):
                    break
            time.sleep(0.01)

    def close(self) -> None:
        if not self.sim:
            self.driver.stop()
        self.cluster.close()

    def base_summary(self) -> dict:
        c = self.cluster
        leaked = c.leaked_buffers()
        rq_ok = all(e.rq_depth(t) == e.initial_depth[t] for e in c.engines.values() for t in e.tenants)
        dead = sum(len(e.dead_letters) for e in c.engines.values())
        snap = c.counters.snapshot()
        violations = dict(snap["violations"])
        violations["buffer_leak"] = leaked
        violations["rbr_imbalance"] = sum(0 if e.check_rbr_balance() else 1 for e in c.engines.values())
        return {
            "scenario": self.cfg.name,
            "backend": self.cfg.backend,
            "scheduler": self.cfg.scheduler,
            "transfer_mode": self.cfg.transfer_mode,
            "seed": self.cfg.seed,
            "counters": snap,
            "function_copies": sum(n for site, n in snap["copies"].items() if not site.startswith("ingress")),
            "fabric_ops": c.counters.total_fabric_ops,
            "dead_letters": dead,
            "rq_depth_restored": rq_ok,
            "engines": {str(n): e.metrics() for n, e in c.engines.items()} if self.sim else {},
            "violations": violations,
        }


def _run_dataplane(cfg: ScenarioConfig, trace: bool) -> RunResult:
    run = _Run(cfg, trace)
    clients: dict[int, EchoClient] = {}
    duration_s = cfg.duration_s or max([c.stop_s or 0 for c in cfg.clients] + [1.0])
    for f in cfg.functions:
        ctx = run.ctxs[f.fn_id]
        if f.app == "echo_server":
            run.apps[f.fn_id] = EchoServer(ctx, f.cost_ns)
    clock = run.cluster.clock
    for c in cfg.clients:
        ctx = run.ctxs[c.fn_id]
        cl = EchoClient(ctx, c.target_fn, clock, c.concurrency, c.message_size,
                        cost_ns=cfg.function(c.fn_id).cost_ns)
        clients[c.fn_id] = run.apps[c.fn_id] = cl
    http_clients = []
    if cfg.ingress is not None:
        ing = cfg.ingress
        a = ing.autoscaler
        run.gateway = Gateway(run.cluster, ing.node, ing.tenant, ing.routes,
                              AutoscalerConfig(a.min_workers, a.max_workers, a.up_threshold,
                                               a.down_threshold, _ns(a.window_s), a.abrupt_retire),
                              WorkerCost(**ing.worker_cost.model_dump()))
    t0 = run.start()
    end = t0 + _ns(duration_s)
    for c in cfg.clients:
        cl = clients[c.fn_id]
        cl.start_ns = t0 + _ns(c.start_s)
        cl.stop_ns = end if c.stop_s is None else min(end, t0 + _ns(c.stop_s))
    if cfg.ingress is not None:
        if not run.sim:
            raise NotImplementedError("ingress scenarios run on the SIM backend; "
                                      "use faasfabric.ingress.server for sockets")
        run.ingress = SimIngress(run.gateway, round(cfg.ingress.latency_us * 1000))
        first_host = 0
        for hc in cfg.ingress.clients:
            stop = end if hc.stop_s is None else min(end, t0 + _ns(hc.stop_s))
            http_clients.append(HttpLoadClient(run.ingress, hc.connections, hc.path, hc.body_size,
                                               run.rng, t0 + _ns(hc.start_s), stop, round(hc.think_us * 1000),
                                               hc.requests_per_conn, first_host))
            first_host += hc.connections
        run.ingress.start_autoscaler(stop_at=end)
    if run.sim:
        for c in cfg.clients:
            cl = clients[c.fn_id]
            run.driver.at(cl.start_ns, cl, cl.start)
            if c.bursts is not None:
                t = cl.start_ns + _ns(c.bursts.every_s)
                while t < cl.stop_ns:
                    run.driver.at(t, cl, cl.burst, c.bursts.size)
                    t += _ns(c.bursts.every_s)
        clock.run(until=end)
        run.quiesce()
    else:
        for cl in clients.values():
            run.driver.call(cl, cl.start)
        while clock.now < end:
            time.sleep(0.01)
        run.quiesce()
    window_ns = _ns(cfg.window_s)
    per_tenant: dict[int, list] = defaultdict(list)
    for fn, cl in clients.items():
        per_tenant[cfg.function(fn).tenant].extend(cl.completions)
    for recs in per_tenant.values():
        recs.sort()
    # windows cover the run plus any replies still in flight at its end
    last = max((r[-1][0] for r in per_tenant.values() if r), default=t0)
    n_windows = max(math.ceil(_ns(duration_s) / window_ns), (last - t0) // window_ns + 1) if clients else 0
    result = RunResult(cfg, trace=run.trace)
    result.windows = window_rows(per_tenant, t0, window_ns, n_windows)
    summary = run.base_summary()
    summary["delivered"] = {str(t): len(r) for t, r in sorted(per_tenant.items())}
    summary["sent"] = {str(cfg.function(fn).tenant): cl.seq for fn, cl in sorted(clients.items())}
    summary["latency_ns"] = {str(t): {"p50": _percentile([x[2] for x in r], 0.5),
                                      "p99": _percentile([x[2] for x in r], 0.99)}
                             for t, r in sorted(per_tenant.items())}
    summary["violations"]["corrupt_payload"] = sum(cl.corrupt for cl in clients.values())
    summary["violations"]["undelivered"] = sum(len(cl.outstanding) for cl in clients.values())
    if len(per_tenant) >= 2:
        summary["fairness"] = fairness_summary(result.windows, cfg, duration_s)
    if run.gateway is not None:
        gw = run.gateway
        statuses = Counter()
        for h in http_clients:
            statuses.update(h.statuses)
        summary["ingress"] = {
            **gw.summary(),
            "http_statuses": {str(k): v for k, v in sorted(statuses.items())},
            "requests_sent": sum(h.sent for h in http_clients),
            "client_interrupted": sum(h.interrupted for h in http_clients),
            "copies_in": run.cluster.counters.copies["ingress_in"],
            "copies_out": run.cluster.counters.copies["ingress_out"],
            "max_workers_seen": max([m["worker_count"] for m in gw.metrics] + [len(gw.live)]),
        }
        summary["violations"]["corrupt_payload"] += sum(h.corrupt for h in http_clients)
        result.autoscaler = list(gw.metrics)
    result.summary = summary
    run.close()
    return result


def chain_topology(cfg: ScenarioConfig) -> tuple[dict, dict[str, int]]:
    graph = boutique_graph()
    fn_ids = {f.service: f.fn_id for f in cfg.functions if f.app == "chain"}
    return graph, fn_ids


def run_chain_workload(cfg: ScenarioConfig, trace: bool = False) -> RunResult:
    run = _Run(cfg, trace)
    ch = cfg.chain
    graph, fn_ids = chain_topology(cfg)
    hops = HopLog()
    for f in cfg.functions:
        if f.app == "chain":
            run.apps[f.fn_id] = ChainService(run.ctxs[f.fn_id], graph[f.service], fn_ids, hops, f.cost_ns)
    requests = make_requests(ch.requests, run.rng, tuple(ch.ops))
    refs = [reference_response(graph, ch.entry_service, r) for r in requests]
    clock = run.cluster.clock
    client = ChainClient(run.ctxs[ch.client_fn], fn_ids[ch.entry_service], requests,
                         [r for r, _ in refs], hops, ch.concurrency, clock,
                         cfg.function(ch.client_fn).cost_ns)
    run.apps[ch.client_fn] = client
    run.start()
    if run.sim:
        run.driver.at(clock.now, client, client.start)
        run.quiesce()
    else:
        run.driver.call(client, client.start)
        deadline = time.monotonic() + 120
        while not client.done and time.monotonic() < deadline:
            time.sleep(0.01)
        run.quiesce()
    expected_hops = [h for _, h in refs]
    observed = [hops.hops.get(i + 1, 0) for i in range(len(requests))]
    result = RunResult(cfg, trace=run.trace)
    summary = run.base_summary()
    summary["chain"] = {
        "requests": len(requests),
        "responses": len(client.responses),
        "correct": sum(1 for i, (r, _) in enumerate(refs) if client.responses.get(i + 1) == r),
        "mismatches": client.mismatches,
        "hop_mismatches": sum(1 for a, b in zip(observed, expected_hops) if a != b),
        "min_hops": min(observed) if observed else 0,
        "mean_hops": round(statistics.fmean(observed), 6) if observed else 0,
        "response_digest": _digest_responses(client.responses),
        "latency_p50_ns": _percentile(client.latencies, 0.5) if run.sim else None,
    }
    summary["violations"]["corrupt_payload"] = client.mismatches
    summary["violations"]["undelivered"] = len(requests) - len(client.responses)
    result.summary = summary
    run.close()
    return result


def _digest_responses(responses: dict[int, bytes]) -> str:
    h = hashlib.sha256()
    for rid in sorted(responses):
        h.update(rid.to_bytes(8, "little"))
        h.update(responses[rid])
    return h.hexdigest()
