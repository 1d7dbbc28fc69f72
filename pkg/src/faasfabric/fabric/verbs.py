"""Emulated RDMA verbs: registered regions, RC queue pairs, shared receive queues
and one shared completion queue per node.

Payload movement performed by a link is the modeled NIC DMA; it is accounted as
``dma_transfers`` and never as a software copy.
"""
from __future__ import annotations

import heapq
import itertools
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Callable

from faasfabric import errors
from faasfabric.clock import NS_PER_MS, SimClock, WallClock
from faasfabric.counters import Counters
from faasfabric.fabric import framing
from faasfabric.fabric.framing import Frame, FrameOp
from faasfabric.fabric.links import Backend, LinkCost, SimLink, socket_link_pair
from faasfabric.mempool import FABRIC, BufferDescriptor, MemoryPool, OwnerRef

log = logging.getLogger(__name__)


class QpState(str, Enum):
    INACTIVE = "INACTIVE"
    ACTIVE = "ACTIVE"
    CONNECTING = "CONNECTING"


class Opcode(IntEnum):
    SEND = 1
    RECV = 2
    WRITE = 3


class Direction(str, Enum):
    TX_DONE = "TX_DONE"
    RX_DONE = "RX_DONE"


class Status(str, Enum):
    OK = "OK"
    RNR_TIMEOUT = "RNR_TIMEOUT"
    DISCONNECTED = "DISCONNECTED"


@dataclass(frozen=True)
class MemoryRegionHandle:
    region_id: int
    tenant_id: int
    node_id: object
    extent: int


@dataclass
class WorkRequest:
    wr_id: int
    opcode: Opcode
    descriptor: BufferDescriptor
    remote_offset: int = 0
    tenant_id: int | None = None

    def __post_init__(self):
        if self.tenant_id is None:
            self.tenant_id = self.descriptor.tenant_id


@dataclass(frozen=True)
class CompletionEntry:
    wr_id: int
    qp_id: int
    tenant_id: int
    direction: Direction
    byte_len: int
    status: Status = Status.OK
    # routing descriptor that travelled with a SEND (RX_DONE only)
    header: BufferDescriptor | None = None
    opcode: Opcode = Opcode.SEND


class ReceiveQueue:
    def __init__(self, tenant_id: int, node_id):
        self.tenant_id = tenant_id
        self.node_id = node_id
        self.posted: deque[tuple[int, BufferDescriptor]] = deque()
        # sends that arrived while no buffer was posted, oldest first
        self.waiting: deque = deque()
        self.consumed = 0
        self.total_posted = 0

    @property
    def depth(self) -> int:
        return len(self.posted)

    def __repr__(self) -> str:
        return f"ReceiveQueue(tenant={self.tenant_id}, node={self.node_id!r}, depth={self.depth})"


class QueuePair:
    def __init__(self, qp_id: int, tenant_id: int, local_node, remote_node,
                 shared_rq: ReceiveQueue, ready_at: int, clock):
        self.qp_id = qp_id
        self.tenant_id = tenant_id
        self.local_node = local_node
        self.remote_node = remote_node
        self.shared_rq = shared_rq
        self.send_queue: deque[WorkRequest] = deque()
        self.outstanding = 0
        self.ready_at = ready_at
        self.peer: QueuePair | None = None
        self._clock = clock
        self._state = QpState.CONNECTING

    @property
    def state(self) -> QpState:
        if self._state is QpState.CONNECTING and self._clock.now >= self.ready_at:
            self._state = QpState.INACTIVE
        return self._state

    @state.setter
    def state(self, value: QpState) -> None:
        self._state = value

    @property
    def has_work(self) -> bool:
        return bool(self.send_queue) or self.outstanding > 0

    def __repr__(self) -> str:
        return (f"QueuePair({self.qp_id}, tenant={self.tenant_id}, {self.local_node!r}->"
                f"{self.remote_node!r}, {self.state.value}, outstanding={self.outstanding})")


class _Arrival:
    __slots__ = ("qp", "src_wr_id", "header", "data", "src_node")

    def __init__(self, qp, src_wr_id, header, data, src_node):
        self.qp = qp
        self.src_wr_id = src_wr_id
        self.header = header
        self.data = data
        self.src_node = src_node


@dataclass
class FabricConfig:
    cost: LinkCost = field(default_factory=LinkCost)
    rnr_timeout_ns: int | None = 100 * NS_PER_MS
    max_outstanding: int = 64
    one_sided: bool = False


class Nic:
    """Node-local verbs state. Touched only from its node's engine context."""

    def __init__(self, node_id):
        self.node_id = node_id
        self.cq: deque[CompletionEntry] = deque()
        self.rqs: dict[int, ReceiveQueue] = {}
        self.qps: dict[int, QueuePair] = {}
        self.regions: dict[int, tuple[MemoryRegionHandle, MemoryPool]] = {}
        self.unified: dict[int, int] = {}
        self.links: dict = {}
        self.inflight: dict[int, tuple[QueuePair, WorkRequest]] = {}
        self.timers: list = []
        self._wr_ids = itertools.count(1)
        self.cq_listener: Callable[[], None] | None = None

    def next_wr_id(self) -> int:
        return next(self._wr_ids)

    def unified_pool(self, tenant_id: int) -> MemoryPool:
        try:
            return self.regions[self.unified[tenant_id]][1]
        except KeyError:
            raise errors.UnknownTenant(f"tenant {tenant_id} has no registered pool on {self.node_id}") from None

    def push_cqe(self, cqe: CompletionEntry) -> None:
        self.cq.append(cqe)
        if self.cq_listener is not None:
            self.cq_listener()


class Fabric:
    """Cluster-wide verbs facade over per-node :class:`Nic` state."""

    def __init__(self, config: FabricConfig | None = None, clock=None,
                 backend: Backend = Backend.SIM, counters: Counters | None = None):
        self.config = config or FabricConfig()
        self.backend = Backend(backend)
        if clock is None:
            clock = SimClock() if self.backend is Backend.SIM else WallClock()
        self.clock = clock
        self.counters = counters if counters is not None else Counters()
        self.nics: dict = {}
        self.trace_sink: Callable[[dict], None] | None = None
        self._qp_ids = itertools.count(1)
        self._region_ids = itertools.count(1)
        self._timer_seq = itertools.count()

    # -- topology ------------------------------------------------------------------------------

    def add_node(self, node_id) -> Nic:
        if node_id in self.nics:
            raise errors.UnknownNode(f"node {node_id!r} already exists")
        nic = self.nics[node_id] = Nic(node_id)
        return nic

    def nic(self, node_id) -> Nic:
        try:
            return self.nics[node_id]
        except KeyError:
            raise errors.UnknownNode(f"unknown node {node_id!r}") from None

    def _link(self, src, dst):
        nic = self.nics[src]
        link = nic.links.get(dst)
        if link is None:
            if self.backend is Backend.SIM:
                nic.links[dst] = SimLink(self.clock, src, dst, self.config.cost, self._on_frame)
                self.nics[dst].links[src] = SimLink(self.clock, dst, src, self.config.cost, self._on_frame)
            else:
                a_end, b_end = socket_link_pair(src, dst, self.config.cost)
                nic.links[dst] = a_end
                self.nics[dst].links[src] = b_end
            link = nic.links[dst]
        return link

    def _trace(self, node, kind: str, wr_id: int) -> None:
        if self.trace_sink is not None:
            self.trace_sink({"virtual_time": self.clock.now, "node": node,
                             "event_kind": kind, "wr_id": wr_id})

    def _call_later(self, node, delay: int, fn, *args) -> None:
        if self.backend is Backend.SIM:
            self.clock.call_later(delay, fn, *args)
        else:
            heapq.heappush(self.nics[node].timers,
                           (self.clock.now + delay, next(self._timer_seq), fn, args))

    # -- verbs -----------------------------------------------------------------------------

    def register_memory(self, pool: MemoryPool, node_id, unified: bool = True) -> MemoryRegionHandle:
        nic = self.nic(node_id)
        if pool.node_id != node_id or pool.mapping is None:
            raise errors.UnknownPool(f"pool of tenant {pool.tenant_id} is not mapped on {node_id!r}")
        if pool.region is not None:
            raise errors.DuplicateRegistration(f"pool of tenant {pool.tenant_id} already registered")
        if unified and pool.tenant_id in nic.unified:
            raise errors.DuplicateRegistration(f"tenant {pool.tenant_id} already has a region on {node_id!r}")
        handle = MemoryRegionHandle(next(self._region_ids), pool.tenant_id, node_id, pool.extent)
        nic.regions[handle.region_id] = (handle, pool)
        if unified:
            nic.unified[pool.tenant_id] = handle.region_id
        pool.region = handle
        return handle

    def rq(self, tenant_id: int, node_id) -> ReceiveQueue:
        nic = self.nic(node_id)
        rq = nic.rqs.get(tenant_id)
        if rq is None:
            if tenant_id not in nic.unified:
                raise errors.UnknownTenant(f"tenant {tenant_id} not registered on {node_id!r}")
            rq = nic.rqs[tenant_id] = ReceiveQueue(tenant_id, node_id)
        return rq

    def create_qp(self, tenant_id: int, local_node, remote_node) -> QueuePair:
        if local_node == remote_node:
            raise errors.UnknownNode("a queue pair needs two distinct nodes")
        local, remote = self.nic(local_node), self.nic(remote_node)
        for nic in (local, remote):
            if tenant_id not in nic.unified:
                raise errors.UnknownTenant(f"tenant {tenant_id} not registered on {nic.node_id!r}")
        ready_at = self.clock.now + self.config.cost.connect_delay_ns
        a = QueuePair(next(self._qp_ids), tenant_id, local_node, remote_node,
                      self.rq(tenant_id, local_node), ready_at, self.clock)
        b = QueuePair(next(self._qp_ids), tenant_id, remote_node, local_node,
                      self.rq(tenant_id, remote_node), ready_at, self.clock)
        a.peer, b.peer = b, a
        local.qps[a.qp_id] = a
        remote.qps[b.qp_id] = b
        self._link(local_node, remote_node)
        return a

    def qps_of(self, node_id) -> list[QueuePair]:
        return list(self.nic(node_id).qps.values())

    def new_wr(self, node_id, opcode: Opcode, descriptor: BufferDescriptor, remote_offset: int = 0) -> WorkRequest:
        return WorkRequest(self.nic(node_id).next_wr_id(), opcode, descriptor, remote_offset)

    def _check_postable(self, qp: QueuePair, wr: WorkRequest) -> None:
        if qp.state is QpState.CONNECTING:
            raise errors.QpNotReady(f"qp {qp.qp_id} still connecting")
        if qp.outstanding >= self.config.max_outstanding:
            raise errors.QpSaturated(f"qp {qp.qp_id} has {qp.outstanding} outstanding sends")
        if wr.descriptor.tenant_id != qp.tenant_id:
            raise errors.TenantMismatch(f"tenant {wr.descriptor.tenant_id} descriptor on qp of tenant {qp.tenant_id}")

    def post_send(self, qp: QueuePair, wr: WorkRequest, caller: OwnerRef | None = None) -> None:
        if wr.opcode is not Opcode.SEND:
            raise errors.BadOpcode(f"post_send needs SEND, got {wr.opcode.name}")
        self._check_postable(qp, wr)
        nic = self.nics[qp.local_node]
        pool = nic.unified_pool(qp.tenant_id)
        pool.transfer(wr.descriptor, caller or OwnerRef.engine(qp.local_node), FABRIC)
        data = pool.dma_read(wr.descriptor)
        qp.send_queue.append(wr)
        qp.outstanding += 1
        qp.state = QpState.ACTIVE
        nic.inflight[wr.wr_id] = (qp, wr)
        self.counters.record_op("send")
        self._trace(qp.local_node, "post_send", wr.wr_id)
        frame = Frame(wr.wr_id, FrameOp.SEND, qp.tenant_id,
                      framing.send_payload(qp.peer.qp_id, wr.descriptor.pack(), data))
        nic.links[qp.remote_node].send(frame, len(data))

    def post_recv(self, rq: ReceiveQueue, descriptor: BufferDescriptor,
                  caller: OwnerRef | None = None, wr_id: int | None = None) -> int:
        """Queue a receive buffer; returns the receive work request id."""
        if descriptor.tenant_id != rq.tenant_id:
            self.counters.record_violation("cross_tenant")
            raise errors.TenantMismatch(
                f"tenant {descriptor.tenant_id} buffer posted to RQ of tenant {rq.tenant_id}")
        nic = self.nics[rq.node_id]
        pool = nic.unified_pool(rq.tenant_id)
        pool.transfer(descriptor, caller or OwnerRef.engine(rq.node_id), FABRIC)
        if wr_id is None:
            wr_id = nic.next_wr_id()
        rq.posted.append((wr_id, descriptor.replace(length=0)))
        rq.total_posted += 1
        self._trace(rq.node_id, "post_recv", wr_id)
        while rq.waiting and rq.posted:
            self._match(nic, rq, rq.waiting.popleft())
        return wr_id

    def post_write(self, qp: QueuePair, wr: WorkRequest, remote_offset: int | None = None,
                   region: MemoryRegionHandle | None = None, caller: OwnerRef | None = None) -> None:
        if not self.config.one_sided:
            raise errors.ModeDisabled("one-sided writes are disabled in two-sided mode")
        if wr.opcode is not Opcode.WRITE:
            raise errors.BadOpcode(f"post_write needs WRITE, got {wr.opcode.name}")
        if remote_offset is None:
            remote_offset = wr.remote_offset
        self._check_postable(qp, wr)
        remote = self.nics[qp.remote_node]
        if region is None:
            region = remote.regions[remote.unified[qp.tenant_id]][0]
        if region.region_id not in remote.regions or region.node_id != qp.remote_node:
            raise errors.UnknownPool(f"region {region.region_id} is not registered on {qp.remote_node!r}")
        target = remote.regions[region.region_id][1]
        n = wr.descriptor.length
        slot, inner = divmod(remote_offset, target.buffer_size) if remote_offset >= 0 else (-1, 0)
        # one trailing byte per write is the arrival flag the receiver polls
        if slot < 0 or slot >= target.buffer_count or inner + n + 1 > target.buffer_size:
            raise errors.OffsetOutOfRange(f"write of {n} bytes at {remote_offset} exceeds region extent")
        nic = self.nics[qp.local_node]
        pool = nic.unified_pool(qp.tenant_id)
        pool.transfer(wr.descriptor, caller or OwnerRef.engine(qp.local_node), FABRIC)
        data = pool.dma_read(wr.descriptor)
        qp.send_queue.append(wr)
        qp.outstanding += 1
        qp.state = QpState.ACTIVE
        nic.inflight[wr.wr_id] = (qp, wr)
        self.counters.record_op("write")
        self._trace(qp.local_node, "post_write", wr.wr_id)
        frame = Frame(wr.wr_id, FrameOp.WRITE, qp.tenant_id,
                      framing.write_payload(qp.peer.qp_id, region.region_id, remote_offset, data))
        nic.links[qp.remote_node].send(frame, len(data))

    def poll_cq(self, node_id, max_entries: int) -> list[CompletionEntry]:
        nic = self.nics[node_id]
        out = []
        cq = nic.cq
        while cq and len(out) < max_entries:
            cqe = cq.popleft()
            if cqe.direction is Direction.TX_DONE:
                nic.qps[cqe.qp_id].outstanding -= 1
            out.append(cqe)
        return out

    # -- one-sided helpers (receiver side) ---------------------------------------------------------

    def poll_write_flag(self, region: MemoryRegionHandle, offset: int, length: int) -> bool:
        """Check and clear the arrival flag that trails a one-sided write."""
        pool = self.nics[region.node_id].regions[region.region_id][1]
        slot, inner = divmod(offset, pool.buffer_size)
        buf = pool.buffers[slot]
        if buf.payload is None or buf.payload[inner + length] != 1:
            return False
        buf.payload[inner + length] = 0
        return True

    def region_view(self, region: MemoryRegionHandle, offset: int, length: int) -> memoryview:
        pool = self.nics[region.node_id].regions[region.region_id][1]
        slot, inner = divmod(offset, pool.buffer_size)
        return memoryview(pool.buffers[slot].storage())[inner:inner + length]

    # -- frame handling ------------------------------------------------------------------------

    def _on_frame(self, node_id, src_node, frame: Frame) -> None:
        nic = self.nics[node_id]
        op = frame.opcode
        if op is FrameOp.SEND:
            qpn, header, data = framing.split_send(frame.payload)
            qp = nic.qps[qpn]
            rq = qp.shared_rq
            arrival = _Arrival(qp, frame.wr_id, header, data, src_node)
            if rq.waiting or not rq.posted:
                rq.waiting.append(arrival)
                self._trace(node_id, "rnr_wait", frame.wr_id)
                if self.config.rnr_timeout_ns is not None:
                    self._call_later(node_id, self.config.rnr_timeout_ns, self._rnr_expire, rq, arrival)
            else:
                self._match(nic, rq, arrival)
        elif op is FrameOp.WRITE:
            qpn, region_id, offset, data = framing.split_write(frame.payload)
            _, target = nic.regions[region_id]
            slot, inner = divmod(offset, target.buffer_size)
            storage = target.buffers[slot].storage()
            storage[inner:inner + len(data)] = data
            storage[inner + len(data)] = 1
            self.counters.record_dma(len(data))
            self._trace(node_id, "write_landed", frame.wr_id)
            nic.links[src_node].send(Frame(frame.wr_id, FrameOp.ACK, frame.tenant_id), 0)
        elif op in (FrameOp.ACK, FrameOp.NAK_RNR):
            qp, wr = nic.inflight.pop(frame.wr_id)
            if qp.send_queue and qp.send_queue[0] is wr:
                qp.send_queue.popleft()
            else:
                qp.send_queue.remove(wr)
            status = Status.OK if op is FrameOp.ACK else Status.RNR_TIMEOUT
            pool = nic.unified_pool(qp.tenant_id)
            pool.transfer(wr.descriptor, FABRIC, OwnerRef.engine(node_id))
            self._trace(node_id, "tx_done" if status is Status.OK else "rnr_timeout", wr.wr_id)
            nic.push_cqe(CompletionEntry(wr.wr_id, qp.qp_id, qp.tenant_id, Direction.TX_DONE,
                                         wr.descriptor.length, status, opcode=wr.opcode))
        else:  # pragma: no cover - FrameDecoder rejects unknown opcodes
            raise errors.BadOpcode(str(op))

    def _match(self, nic: Nic, rq: ReceiveQueue, arrival: _Arrival) -> None:
        wr_id, rdesc = rq.posted.popleft()
        rq.consumed += 1
        pool = nic.unified_pool(rq.tenant_id)
        filled = pool.dma_write(rdesc, arrival.data)
        pool.transfer(filled, FABRIC, OwnerRef.engine(nic.node_id))
        header = BufferDescriptor.unpack(arrival.header)
        self._trace(nic.node_id, "rx_done", wr_id)
        nic.push_cqe(CompletionEntry(wr_id, arrival.qp.qp_id, rq.tenant_id, Direction.RX_DONE,
                                     len(arrival.data), Status.OK, header))
        nic.links[arrival.src_node].send(Frame(arrival.src_wr_id, FrameOp.ACK, rq.tenant_id), 0)

    def _rnr_expire(self, rq: ReceiveQueue, arrival: _Arrival) -> None:
        for i, waiting in enumerate(rq.waiting):
            if waiting is arrival:
                del rq.waiting[i]
                nic = self.nics[rq.node_id]
                nic.links[arrival.src_node].send(Frame(arrival.src_wr_id, FrameOp.NAK_RNR, rq.tenant_id), 0)
                return

    # -- socket backend progress ----------------------------------------------------------------

    def progress(self, node_id) -> int:
        """Drain inbound frames and due timers for one node (socket backend)."""
        nic = self.nics[node_id]
        handled = 0
        for peer, link in list(nic.links.items()):
            for frame in link.receive():
                self._on_frame(node_id, peer, frame)
                handled += 1
        now = self.clock.now
        while nic.timers and nic.timers[0][0] <= now:
            _, _, fn, args = heapq.heappop(nic.timers)
            fn(*args)
            handled += 1
        return handled

    def close(self) -> None:
        for nic in self.nics.values():
            for link in nic.links.values():
                close = getattr(link, "close", None)
                if close is not None:
                    close()
