"""Scenario manifests: a single JSON document validated with pydantic.

Times in manifests are seconds (floats); the runner converts to integer
nanoseconds. Every cross-reference (nodes, tenants, function ids, routes) is
checked up front so that a bad manifest fails with a field-precise message.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from faasfabric import errors

FN_ID_MAX = 0xEFFF  # ids above are reserved for ingress workers


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EngineCostCfg(_Model):
    iteration_ns: int = Field(200, ge=0)
    tx_ns: int = Field(300, ge=0)
    rx_ns: int = Field(300, ge=0)
    tx_batch: int = Field(32, ge=1)
    cq_batch: int = Field(64, ge=1)
    backoff_ns: int = Field(10_000, ge=1)


class NodeCfg(_Model):
    name: str
    engine_cost: EngineCostCfg = Field(default_factory=EngineCostCfg)


class TenantCfg(_Model):
    id: int = Field(ge=1, le=0xFFFF)
    weight: int = Field(1, ge=1)
    buffers: int = Field(1024, ge=1)
    buffer_size: int = Field(4096, ge=64)


class FunctionCfg(_Model):
    fn_id: int = Field(ge=1, le=FN_ID_MAX)
    tenant: int
    node: str
    app: Literal["echo_server", "echo_client", "chain", "chain_client"]
    service: str | None = None
    cost_ns: int = Field(2_000, ge=0)


class BurstCfg(_Model):
    every_s: float = Field(gt=0)
    size: int = Field(ge=1)


class ClientCfg(_Model):
    """Closed-loop echo load from ``fn_id`` (an echo_client function) to ``target_fn``."""

    fn_id: int
    target_fn: int
    concurrency: int = Field(1, ge=1)
    message_size: int = Field(1024, ge=0)
    start_s: float = Field(0.0, ge=0)
    stop_s: float | None = None
    bursts: BurstCfg | None = None


class AutoscalerCfg(_Model):
    min_workers: int = Field(1, ge=1)
    max_workers: int = Field(8, ge=1)
    up_threshold: float = 0.60
    down_threshold: float = 0.30
    window_s: float = Field(1.0, gt=0)
    abrupt_retire: bool = False


class WorkerCostCfg(_Model):
    request_ns: int = Field(6_000, ge=0)
    response_ns: int = Field(4_000, ge=0)
    per_byte_ns: float = Field(0.25, ge=0)


class HttpClientCfg(_Model):
    connections: int = Field(1, ge=1)
    path: str
    body_size: int = Field(256, ge=0)
    start_s: float = Field(0.0, ge=0)
    stop_s: float | None = None
    think_us: float = Field(0.0, ge=0)
    requests_per_conn: int | None = Field(None, ge=1)


class IngressCfg(_Model):
    node: str
    tenant: int
    routes: dict[str, int]
    autoscaler: AutoscalerCfg = Field(default_factory=AutoscalerCfg)
    worker_cost: WorkerCostCfg = Field(default_factory=WorkerCostCfg)
    latency_us: float = Field(20.0, ge=0)
    clients: list[HttpClientCfg] = Field(default_factory=list)


class ChainCfg(_Model):
    graph: Literal["boutique"] = "boutique"
    client_fn: int
    entry_service: str = "frontend"
    requests: int = Field(1000, ge=1)
    concurrency: int = Field(8, ge=1)
    ops: list[str] = Field(default_factory=lambda: ["home", "product", "checkout"])


class PrimitiveCfg(_Model):
    message_size: int = Field(4096, ge=1)
    messages: int = Field(100, ge=1)
    senders: int = Field(1, ge=1)


class ScenarioConfig(_Model):
    name: str
    description: str = ""
    seed: int = 0
    backend: Literal["SIM", "SOCKET"] = "SIM"
    transfer_mode: Literal["TWO_SIDED", "OWDL", "OWRC_BEST", "OWRC_WORST"] = "TWO_SIDED"
    scheduler: Literal["DWRR", "FCFS"] = "DWRR"
    quantum_base: int = Field(2048, ge=1)
    active_cap: int = Field(32, ge=1)
    qps_per_peer: int = Field(4, ge=1)
    initial_rq_depth: int = Field(64, ge=1)
    channel_capacity: int = Field(1024, ge=1)
    duration_s: float | None = Field(None, gt=0)
    window_s: float = Field(1.0, gt=0)
    settle_margin_s: float = Field(2.0, ge=0)
    nodes: list[NodeCfg] = Field(min_length=1)
    tenants: list[TenantCfg] = Field(min_length=1)
    functions: list[FunctionCfg] = Field(default_factory=list)
    clients: list[ClientCfg] = Field(default_factory=list)
    ingress: IngressCfg | None = None
    chain: ChainCfg | None = None
    primitive: PrimitiveCfg | None = None

    @model_validator(mode="after")
    def _cross_references(self) -> "ScenarioConfig":
        nodes = [n.name for n in self.nodes]
        if len(set(nodes)) != len(nodes):
            raise ValueError("nodes: duplicate node name")
        tenants = {t.id: t for t in self.tenants}
        if len(tenants) != len(self.tenants):
            raise ValueError("tenants: duplicate tenant id")
        fns: dict[int, FunctionCfg] = {}
        for i, f in enumerate(self.functions):
            where = f"functions[{i}]"
            if f.fn_id in fns:
                raise ValueError(f"{where}.fn_id: duplicate function id {f.fn_id}")
            if f.node not in nodes:
                raise ValueError(f"{where}.node: unknown node {f.node!r}")
            if f.tenant not in tenants:
                raise ValueError(f"{where}.tenant: unknown tenant {f.tenant}")
            if f.app == "chain" and not f.service:
                raise ValueError(f"{where}.service: chain functions need a service name")
            fns[f.fn_id] = f
        for i, c in enumerate(self.clients):
            where = f"clients[{i}]"
            src = fns.get(c.fn_id)
            if src is None or src.app != "echo_client":
                raise ValueError(f"{where}.fn_id: {c.fn_id} is not an echo_client function")
            dst = fns.get(c.target_fn)
            if dst is None:
                raise ValueError(f"{where}.target_fn: no function {c.target_fn}")
            if dst.tenant != src.tenant:
                raise ValueError(f"{where}.target_fn: function {c.target_fn} belongs to another tenant")
            size = tenants[src.tenant].buffer_size
            if c.message_size + 8 > size:
                raise ValueError(f"{where}.message_size: {c.message_size} does not fit a {size}-byte buffer")
            if c.stop_s is not None and c.stop_s <= c.start_s:
                raise ValueError(f"{where}.stop_s: must be after start_s")
        if self.ingress is not None:
            ing = self.ingress
            if ing.node not in nodes:
                raise ValueError(f"ingress.node: unknown node {ing.node!r}")
            if ing.tenant not in tenants:
                raise ValueError(f"ingress.tenant: unknown tenant {ing.tenant}")
            for path, fn in ing.routes.items():
                if fn not in fns:
                    raise ValueError(f"ingress.routes[{path!r}]: no function {fn}")
                if fns[fn].tenant != ing.tenant:
                    raise ValueError(f"ingress.routes[{path!r}]: function {fn} belongs to another tenant")
            a = ing.autoscaler
            if a.min_workers > a.max_workers:
                raise ValueError("ingress.autoscaler: min_workers exceeds max_workers")
            if not 0 <= a.down_threshold < a.up_threshold <= 1:
                raise ValueError("ingress.autoscaler: need 0 <= down_threshold < up_threshold <= 1")
        if self.chain is not None:
            from faasfabric.harness.apps import boutique_graph
            graph = boutique_graph()
            services = {f.service: f for f in fns.values() if f.app == "chain"}
            for name in graph:
                if name not in services:
                    raise ValueError(f"chain: service {name!r} has no function")
            cl = fns.get(self.chain.client_fn)
            if cl is None or cl.app != "chain_client":
                raise ValueError(f"chain.client_fn: {self.chain.client_fn} is not a chain_client function")
            if len({f.tenant for f in services.values()} | {cl.tenant}) != 1:
                raise ValueError("chain: all chain functions must belong to one tenant")
            if self.chain.entry_service not in graph:
                raise ValueError(f"chain.entry_service: unknown service {self.chain.entry_service!r}")
            for op in self.chain.ops:
                if op not in graph[self.chain.entry_service].ops:
                    raise ValueError(f"chain.ops: {self.chain.entry_service} has no op {op!r}")
        if self.transfer_mode != "TWO_SIDED" and self.primitive is None:
            raise ValueError("primitive: one-sided transfer modes need a primitive section")
        return self

    def tenant(self, tid: int) -> TenantCfg:
        return next(t for t in self.tenants if t.id == tid)

    def function(self, fn_id: int) -> FunctionCfg:
        return next(f for f in self.functions if f.fn_id == fn_id)


def _describe(exc: ValidationError) -> list[str]:
    lines = []
    for err in exc.errors():
        if not err["loc"] and err["type"] == "value_error":
            # cross-reference checks already name the field
            lines.append(str(err["ctx"]["error"]))
            continue
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return lines


def parse_config(data: dict | str) -> ScenarioConfig:
    try:
        if isinstance(data, str):
            return ScenarioConfig.model_validate_json(data)
        return ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        raise errors.ConfigInvalid(_describe(exc)) from None


def load_config(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise errors.ConfigInvalid([f"{path}: {exc.strerror}"]) from None
    try:
        json.loads(text)
    except json.JSONDecodeError as exc:
        raise errors.ConfigInvalid([f"{path}: not JSON ({exc.msg} at line {exc.lineno})"]) from None
    return parse_config(text)


def bundled_manifest(name: str) -> Path:
    """Path of a manifest shipped with the package (``echo``, ``fairness``, ``chain``, ``ingress``)."""
    here = Path(__file__).resolve().parent.parent / "manifests"
    path = here / f"{name}.json"
    if not path.exists():
        raise errors.ConfigInvalid([f"no bundled manifest {name!r}"])
    return path
