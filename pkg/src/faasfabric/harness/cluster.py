"""Control-plane assembly of a multi-node cluster: pools, mappings, engines,
queue pairs, function registration and routing tables."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from types import MappingProxyType

from faasfabric import errors
from faasfabric.clock import NS_PER_MS
from faasfabric.counters import Counters
from faasfabric.dne import Engine, EngineConfig
from faasfabric.fabric import Backend, Fabric, FabricConfig
from faasfabric.iolib import FunctionContext, Placement
from faasfabric.ipc import DEFAULT_CAPACITY, NodeIpc
from faasfabric.mempool import OwnerRef, PoolRegistry


@dataclass
class TenantSpec:
    weight: int = 1
    buffers: int = 1024
    buffer_size: int = 4096


@dataclass
class FunctionInfo:
    fn_id: int
    tenant_id: int
    node: object
    owner: OwnerRef
    ctx: FunctionContext | None = None


@dataclass
class Cluster:
    nodes: list
    tenants: dict[int, TenantSpec]
    backend: Backend = Backend.SIM
    fabric_config: FabricConfig = field(default_factory=FabricConfig)
    engine_configs: dict = field(default_factory=dict)
    default_engine: EngineConfig = field(default_factory=EngineConfig)
    channel_capacity: int = DEFAULT_CAPACITY
    # tenants hosted per node; default every tenant everywhere
    placement: dict | None = None
    # SIM only: wake engines from events; tests turn this off to step iterations by hand
    drive: bool = True

    def __post_init__(self):
        self.counters = Counters()
        self.pools = PoolRegistry(self.counters)
        self.fabric = Fabric(self.fabric_config, backend=self.backend, counters=self.counters)
        self.ipcs: dict = {}
        self.engines: dict = {}
        self.functions: dict[int, FunctionInfo] = {}
        # per-node intra-node route tables; functions only see read-only views
        self._intra: dict = {}
        for node in self.nodes:
            self.fabric.add_node(node)
            hosted = self._hosted(node)
            for tid in hosted:
                spec = self.tenants[tid]
                pool = self.pools.create_pool(tid, node, spec.buffers, spec.buffer_size)
                self.pools.import_pool(self.pools.export_pool(pool), f"engine-{node}")
                self.fabric.register_memory(pool, node)
            ipc = self.ipcs[node] = NodeIpc(node, self.pools)
            cfg = self.engine_configs.get(node, self.default_engine)
            self.engines[node] = Engine(node, self.fabric, self.pools, ipc, cfg,
                                        {t: self.tenants[t].weight for t in hosted})
            self._intra[node] = {}
        self._connected = False

    def _hosted(self, node) -> list[int]:
        if self.placement is None or node not in self.placement:
            return sorted(self.tenants)
        return sorted(self.placement[node])

    @property
    def clock(self):
        return self.fabric.clock

    # -- functions and routes --------------------------------------------------------------

    def add_function(self, fn_id: int, tenant_id: int, node, owner: OwnerRef | None = None) -> FunctionContext:
        if fn_id in self.functions:
            raise errors.DuplicateFn(f"function {fn_id} already deployed")
        if node not in self.ipcs:
            raise errors.UnknownNode(f"unknown node {node!r}")
        owner = owner or OwnerRef.function(fn_id, tenant_id)
        self.ipcs[node].register_endpoint(fn_id, owner, self.channel_capacity)
        info = self.functions[fn_id] = FunctionInfo(fn_id, tenant_id, node, owner)
        for n, table in self._intra.items():
            table[fn_id] = Placement.LOCAL if n == node else Placement.REMOTE
        info.ctx = FunctionContext(fn_id, tenant_id, node, self.ipcs[node],
                                   MappingProxyType(self._intra[node]), owner)
        for engine in self.engines.values():
            engine.set_routes({f: i.node for f, i in self.functions.items()})
        return info.ctx

    def ctx(self, fn_id: int) -> FunctionContext:
        return self.functions[fn_id].ctx

    # -- bring-up --------------------------------------------------------------------------

    def connect(self) -> None:
        """Create queue pairs between every node pair and fill receive queues."""
        if self._connected:
            return
        for a, b in itertools.combinations(self.nodes, 2):
            self.engines[a].connect(b)
            self.engines[b].adopt_peer_qps(a, self.engines[a])
        for engine in self.engines.values():
            engine.start()
            if self.backend is Backend.SIM and self.drive:
                engine.attach_sim()
        self._connected = True

    def settle(self) -> None:
        """Advance virtual time until every queue pair has finished connecting."""
        if self.backend is Backend.SIM:
            delay = self.fabric_config.cost.connect_delay_ns
            self.clock.run(until=self.clock.now + delay + NS_PER_MS)

    def start(self) -> "Cluster":
        self.connect()
        self.settle()
        return self

    # -- drain and checks ------------------------------------------------------------------

    def run_until_quiet(self, limit_ns: int | None = None) -> None:
        clock = self.clock
        end = None if limit_ns is None else clock.now + limit_ns
        while clock.pending():
            nxt = clock.next_time()
            if end is not None and nxt > end:
                clock.run(until=end)
                return
            clock.step()

    def conservation(self) -> dict:
        """Where every buffer is: free, held by the engine for receives, or elsewhere."""
        out = {}
        for pool in self.pools.pools():
            hist = pool.owner_histogram()
            out[f"{pool.tenant_id}@{pool.node_id}"] = hist
        return out

    def leaked_buffers(self) -> int:
        """Buffers neither free nor posted as receive buffers."""
        leaked = 0
        for pool in self.pools.pools():
            engine = self.engines[pool.node_id]
            posted = sum(1 for d in engine.rbr.values() if d.tenant_id == pool.tenant_id)
            leaked += pool.buffer_count - pool.free_count - posted
        return leaked

    def close(self) -> None:
        for engine in self.engines.values():
            engine.stop_thread()
        self.fabric.close()
