"""Node-local network engine.

One engine owns its node's fabric resources and proxies every inter-node
transfer for the functions on the node. A single iteration runs the stages in
order and never blocks:

1. drain the function channels into per-tenant ``pending_tx``;
2. let the tenant scheduler pick sends and post them on the least-loaded
   queue pair towards the destination node;
3. poll the shared completion queue: finished sends recycle their buffer,
   received messages are looked up in the receive-buffer registry and handed
   to the destination function;
4. post fresh receive buffers for everything consumed;
5. retire idle queue pairs to INACTIVE.
"""
from __future__ import annotations

import logging
import threading
import time
from collections import Counter, deque
from dataclasses import dataclass, field

from faasfabric import errors
from faasfabric.dne.connpool import DEFAULT_ACTIVE_CAP, ConnectionPool
from faasfabric.dne.scheduler import (DEFAULT_QUANTUM_BASE, SchedulerMode, TenantState,
                                      make_scheduler)
from faasfabric.fabric import Backend, CompletionEntry, Direction, Fabric, Opcode, QpState, Status
from faasfabric.ipc import NodeIpc, Side
from faasfabric.mempool import BufferDescriptor, OwnerRef, PoolRegistry

log = logging.getLogger(__name__)


@dataclass
class EngineCost:
    """Virtual time charged per iteration (SIM backend only)."""

    iteration_ns: int = 200
    tx_ns: int = 300
    rx_ns: int = 300
    tx_batch: int = 32
    cq_batch: int = 64
    # retry delay when work is queued but nothing could move
    backoff_ns: int = 10_000

    def charge(self, report: "IterationReport") -> int:
        return self.iteration_ns + self.tx_ns * report.tx_emitted + self.rx_ns * report.rx_dispatched


@dataclass
class EngineConfig:
    scheduler: SchedulerMode = SchedulerMode.DWRR
    quantum_base: int = DEFAULT_QUANTUM_BASE
    active_cap: int = DEFAULT_ACTIVE_CAP
    qps_per_peer: int = 4
    initial_rq_depth: int = 64
    cost: EngineCost = field(default_factory=EngineCost)


@dataclass
class IterationReport:
    drained: int = 0
    tx_emitted: int = 0
    tx_completed: int = 0
    rx_dispatched: int = 0
    reposted: int = 0
    activated: int = 0
    deactivated: int = 0
    dead_lettered: int = 0
    blocked: int = 0
    errors: Counter = field(default_factory=Counter)

    @property
    def idle(self) -> bool:
        return not (self.drained or self.tx_emitted or self.tx_completed or self.rx_dispatched
                    or self.reposted or self.dead_lettered)

    def as_dict(self) -> dict:
        return {"drained": self.drained, "tx_emitted": self.tx_emitted, "tx_completed": self.tx_completed,
                "rx_dispatched": self.rx_dispatched, "reposted": self.reposted,
                "activated": self.activated, "deactivated": self.deactivated,
                "dead_lettered": self.dead_lettered, "errors": dict(self.errors)}


@dataclass(frozen=True)
class DeadLetter:
    reason: str
    descriptor: BufferDescriptor
    time: int


class Engine:
    def __init__(self, node, fabric: Fabric, pools: PoolRegistry, ipc: NodeIpc,
                 config: EngineConfig | None = None, weights: dict[int, int] | None = None):
        self.node = node
        self.fabric = fabric
        self.pools = pools
        self.ipc = ipc
        self.config = config or EngineConfig()
        self.owner = OwnerRef.engine(node)
        self.nic = fabric.nic(node)
        self.tenants: dict[int, TenantState] = {
            t: TenantState(t, w) for t, w in sorted((weights or {}).items())}
        self.scheduler = make_scheduler(self.config.scheduler, self.tenants, self.config.quantum_base)
        self.routes: dict[int, object] = {}
        self.rbr: dict[int, BufferDescriptor] = {}
        self.tx_inflight: dict[int, BufferDescriptor] = {}
        self.conn: dict[object, ConnectionPool] = {}
        self.dead_letters: list[DeadLetter] = []
        self._dl_seen = 0
        self.rx_backlog: deque[BufferDescriptor] = deque()
        self.emission_log: list[tuple[int, int, int]] | None = None
        self.initial_depth: dict[int, int] = {}
        self.posted_total = 0
        self.rx_total = 0
        self.iterations = 0
        self.busy_ns = 0
        self.started = False
        # SIM driver state
        self.busy_until = 0
        self._scheduled = False
        self._in_iteration = False
        self._dirty = False
        self._backoff = 0
        # socket driver state
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()

    # -- control plane ---------------------------------------------------------------------

    def add_tenant(self, tenant_id: int, weight: int = 1) -> TenantState:
        if tenant_id in self.tenants:
            raise errors.DuplicateRegistration(f"tenant {tenant_id} already known to engine {self.node!r}")
        ts = self.tenants[tenant_id] = TenantState(tenant_id, weight)
        return ts

    def set_routes(self, routes: dict[int, object]) -> None:
        """Install the fn_id -> node table; only the control plane calls this."""
        self.routes = dict(routes)

    def connect(self, peer) -> ConnectionPool:
        """Establish ``qps_per_peer`` queue pairs per shared tenant towards ``peer``."""
        pool = self.conn.get(peer)
        if pool is None:
            pool = self.conn[peer] = ConnectionPool(peer, self.config.active_cap, self.fabric.config.max_outstanding)
        peer_nic = self.fabric.nic(peer)
        for tid in self.tenants:
            if tid in self.nic.unified and tid in peer_nic.unified and tid not in pool.by_tenant:
                for _ in range(self.config.qps_per_peer):
                    pool.add(self.fabric.create_qp(tid, self.node, peer))
        return pool

    def adopt_peer_qps(self, peer, other: "Engine") -> None:
        """Register the far ends of queue pairs that ``other`` created towards us."""
        pool = self.conn.get(peer)
        if pool is None:
            pool = self.conn[peer] = ConnectionPool(peer, self.config.active_cap, self.fabric.config.max_outstanding)
        for qp in other.conn[self.node].all_qps():
            if qp.peer.qp_id not in {q.qp_id for q in pool.all_qps()}:
                pool.add(qp.peer)

    def start(self) -> None:
        """Fill each tenant's shared receive queue to its initial depth."""
        for tid, ts in self.tenants.items():
            if tid not in self.nic.unified:
                continue
            rq = self.fabric.rq(tid, self.node)
            pool = self.pools.get(tid, self.node)
            descs = pool.alloc_many(self.owner, self.config.initial_rq_depth)
            for desc in descs:
                self._post_recv(rq, desc)
            self.initial_depth[tid] = len(descs)
        self.started = True

    # -- stages ----------------------------------------------------------------------------

    def enqueue(self, desc: BufferDescriptor) -> None:
        ts = self.tenants.get(desc.tenant_id)
        if ts is None:
            self._dead_letter("UNKNOWN_TENANT", desc)
            return
        ts.pending_tx.append(desc)
        self.scheduler.on_enqueue(desc.tenant_id)

    def drain_channels(self) -> int:
        n = 0
        for ch in self.ipc.ordered_channels():
            while (desc := ch.recv(Side.ENGINE)) is not None:
                self.enqueue(desc)
                n += 1
        return n

    def tx_stage(self, desc: BufferDescriptor) -> bool:
        """Route and post one descriptor; False means it must stay queued."""
        dst_node = self.routes.get(desc.dst_fn)
        if dst_node is None:
            self._dead_letter("NO_ROUTE", desc)
            return True
        if dst_node == self.node:
            return self._deliver_local(desc)
        pool = self.conn.get(dst_node)
        if pool is None:
            self._dead_letter("NO_ROUTE", desc)
            return True
        qp = pool.select(desc.tenant_id)
        wr = self.fabric.new_wr(self.node, Opcode.SEND, desc)
        self.fabric.post_send(qp, wr, self.owner)
        self.tx_inflight[wr.wr_id] = desc
        return True

    def schedule_tx(self, report: IterationReport) -> None:
        blocked: set[int] = set()
        budget = self.config.cost.tx_batch
        while budget > 0:
            pick = self.scheduler.peek(blocked)
            if pick is None:
                break
            ts, desc = pick
            try:
                sent = self.tx_stage(desc)
            except (errors.QpNotReady, errors.QpSaturated, errors.ActiveCapExceeded) as exc:
                report.errors[exc.code] += 1
                sent = False
            except errors.NoRoute as exc:
                report.errors[exc.code] += 1
                self._dead_letter("NO_ROUTE", desc)
                sent = True
            if not sent:
                blocked.add(ts.tenant_id)
                self.scheduler.block(ts)
                report.blocked += 1
                continue
            self.scheduler.commit(ts)
            ts.emitted += 1
            ts.emitted_bytes += desc.length
            if self.emission_log is not None:
                self.emission_log.append((ts.tenant_id, desc.buffer_id, desc.length))
            report.tx_emitted += 1
            budget -= 1

    def rx_stage(self, cqe: CompletionEntry) -> None:
        try:
            rdesc = self.rbr.pop(cqe.wr_id)
        except KeyError:
            raise errors.RbrMiss(f"completion for unknown receive {cqe.wr_id} on {self.node!r}") from None
        self.rx_total += 1
        self.tenants[cqe.tenant_id].cqe_consumed += 1
        h = cqe.header
        desc = rdesc.replace(length=cqe.byte_len, src_fn=h.src_fn, dst_fn=h.dst_fn, flags=h.flags)
        if not self._deliver_local(desc):
            self.rx_backlog.append(desc)

    def tx_done(self, cqe: CompletionEntry) -> None:
        desc = self.tx_inflight.pop(cqe.wr_id)
        if cqe.status is Status.OK:
            self.pools.get(desc.tenant_id, self.node).free(desc, self.owner)
        else:
            self._dead_letter(cqe.status.value, desc)

    def poll_completions(self, report: IterationReport) -> None:
        for cqe in self.fabric.poll_cq(self.node, self.config.cost.cq_batch):
            if cqe.direction is Direction.TX_DONE:
                self.tx_done(cqe)
                report.tx_completed += 1
            else:
                self.rx_stage(cqe)
                report.rx_dispatched += 1

    def repost_receive_buffers(self) -> int:
        total = 0
        for tid, ts in self.tenants.items():
            need = ts.cqe_consumed - ts.reposted
            if need <= 0:
                continue
            rq = self.fabric.rq(tid, self.node)
            for desc in self.pools.get(tid, self.node).alloc_many(self.owner, need):
                self._post_recv(rq, desc)
                ts.reposted += 1
                total += 1
        return total

    def manage_connection_pool(self) -> int:
        return sum(pool.deactivate_idle() for pool in self.conn.values())

    def iteration(self) -> IterationReport:
        report = IterationReport()
        activations = self._activations()
        report.drained = self.drain_channels()
        self.schedule_tx(report)
        self.poll_completions(report)
        while self.rx_backlog:
            if not self._deliver_local(self.rx_backlog[0]):
                break
            self.rx_backlog.popleft()
        report.reposted = self.repost_receive_buffers()
        report.deactivated = self.manage_connection_pool()
        report.activated = self._activations() - activations
        report.dead_lettered = len(self.dead_letters) - self._dl_seen
        self._dl_seen = len(self.dead_letters)
        self.iterations += 1
        return report

    # -- helpers ---------------------------------------------------------------------------

    def _post_recv(self, rq, desc: BufferDescriptor) -> None:
        wr_id = self.fabric.post_recv(rq, desc, self.owner)
        self.rbr[wr_id] = desc
        self.posted_total += 1

    def _deliver_local(self, desc: BufferDescriptor) -> bool:
        try:
            self.ipc.channel(desc.dst_fn).send(Side.ENGINE, desc)
        except errors.ChannelFull:
            return False
        except errors.NotFound:
            self._dead_letter("UNKNOWN_DST_FN", desc)
        except (errors.Disconnected, errors.TenantMismatch) as exc:
            self._dead_letter(exc.code, desc)
        return True

    def _dead_letter(self, reason: str, desc: BufferDescriptor) -> None:
        self.fabric.counters.record_event(f"dead_letter:{reason}")
        self.dead_letters.append(DeadLetter(reason, desc, self.fabric.clock.now))

    def reclaim_dead_letters(self) -> int:
        """Return dead-lettered buffers to their pools (the engine still owns them)."""
        n = 0
        for dl in self.dead_letters:
            self.pools.get(dl.descriptor.tenant_id, self.node).free(dl.descriptor, self.owner)
            n += 1
        self.dead_letters.clear()
        self._dl_seen = 0
        return n

    # -- observation -----------------------------------------------------------------------

    def _activations(self) -> int:
        return sum(pool.activations for pool in self.conn.values())

    def active_qps(self) -> int:
        return sum(pool.active_count() for pool in self.conn.values())

    def has_pending(self) -> bool:
        return (any(ts.pending_tx for ts in self.tenants.values()) or bool(self.nic.cq)
                or bool(self.rx_backlog)
                or any(len(ch.to_engine) for ch in self.ipc.channels.values()))

    def repost_shortfall(self) -> int:
        return sum(ts.cqe_consumed - ts.reposted for ts in self.tenants.values())

    def rq_depth(self, tenant_id: int) -> int:
        return self.fabric.rq(tenant_id, self.node).depth

    def check_rbr_balance(self) -> bool:
        return len(self.rbr) == self.posted_total - self.rx_total

    def metrics(self) -> dict:
        return {
            "virtual_time": self.fabric.clock.now,
            "node": str(self.node),
            "tenants": {
                str(t): {"emitted": ts.emitted, "bytes": ts.emitted_bytes,
                         "rq_depth": self.rq_depth(t) if t in self.nic.unified else 0,
                         "deficit": ts.deficit}
                for t, ts in self.tenants.items()},
            "active_qps": self.active_qps(),
        }

    # -- SIM driver ------------------------------------------------------------------------

    def attach_sim(self) -> None:
        """Wake on completions and function sends instead of spinning in virtual time."""
        self.nic.cq_listener = self.kick
        self.ipc.engine_listener = self.kick

    def kick(self) -> None:
        if self._in_iteration:
            self._dirty = True
            return
        if self._scheduled:
            return
        self._scheduled = True
        clock = self.fabric.clock
        clock.call_at(max(clock.now, self.busy_until), self._run_sim)

    def _run_sim(self) -> None:
        self._scheduled = False
        clock = self.fabric.clock
        self._in_iteration, self._dirty = True, False
        report = self.iteration()
        self._in_iteration = False
        cost = self.config.cost.charge(report)
        self.busy_ns += cost
        self.busy_until = clock.now + cost
        more = self._dirty or self.has_pending() or self.repost_shortfall()
        if not more:
            # quiet until the next completion or function send kicks us
            self._backoff = 0
            return
        if report.idle and not self._dirty:
            # work is queued but nothing moved (e.g. queue pairs still connecting): back off
            self._backoff = min(max(self._backoff * 2, self.config.cost.backoff_ns), 1_000_000_000)
            delay = self._backoff
        else:
            self._backoff = 0
            delay = 0
        self._scheduled = True
        clock.call_at(self.busy_until + delay, self._run_sim)

    # -- socket driver ---------------------------------------------------------------------

    def run_forever(self, idle_sleep: float = 50e-6) -> None:
        while not self._stop.is_set():
            self.fabric.progress(self.node)
            report = self.iteration()
            if report.idle:
                time.sleep(idle_sleep)

    def start_thread(self) -> threading.Thread:
        if self.fabric.backend is not Backend.SOCKET:
            raise errors.ModeDisabled("threaded engines run on the socket backend only")
        self._stop.clear()
        self._thread = threading.Thread(target=self.run_forever, name=f"engine-{self.node}", daemon=True)
        self._thread.start()
        return self._thread

    def stop_thread(self, timeout: float = 5.0) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout)
            self._thread = None

    def __repr__(self) -> str:
        return f"Engine({self.node!r}, tenants={sorted(self.tenants)}, rbr={len(self.rbr)})"


def active_qps_have_work(engine: Engine) -> bool:
    """Every ACTIVE queue pair has queued or outstanding sends."""
    return all(qp.has_work for pool in engine.conn.values() for qp in pool.all_qps()
               if qp.state is QpState.ACTIVE)
