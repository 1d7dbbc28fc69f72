"""One-sided alternatives to two-sided message passing, for comparison.

``OWDL``  one-sided write guarded by a lock that lives at the destination:
          acquire round trip, write, release after the write is acknowledged.
          The receiver polls the arrival flag and may consume the buffer once
          the lock is released. Zero copies, three fabric operations.
``OWRC``  one-sided write into a receiver-side staging pool that is not the
          unified pool; the receiver polls, then copies the payload into a
          unified-pool buffer. One copy, one fabric operation. ``OWRC_WORST``
          scales the copy cost to stand for a cold cache.

``TWO_SIDED`` runs through the same bench for a like-for-like comparison: one
SEND matched against a pre-posted receive, completion-driven, zero copies.

Everything runs on the virtual clock; latencies are virtual nanoseconds and
only their ordering is meaningful.
"""
from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass
from enum import Enum

from faasfabric import errors
from faasfabric.clock import NS_PER_MS
from faasfabric.counters import Counters
from faasfabric.fabric import Direction, Fabric, FabricConfig, LinkCost, Opcode, Status
from faasfabric.mempool import CrossMapHandle, MapAccess, MemoryPool, OwnerRef, PoolRegistry

TENANT = 1
LOCK_MSG_BYTES = 8


class TransferMode(str, Enum):
    TWO_SIDED = "TWO_SIDED"
    OWDL = "OWDL"
    OWRC_BEST = "OWRC_BEST"
    OWRC_WORST = "OWRC_WORST"


@dataclass
class BaselineCost:
    poll_interval_ns: int = 1_000
    copy_ns_per_byte: float = 0.5
    worst_copy_factor: float = 1.5
    lock_backoff_ns: int = 2_000
    lock_max_retries: int = 32


@dataclass
class TransferRecord:
    mode: TransferMode
    sender: object
    seq: int
    size: int
    start_ns: int
    end_ns: int | None = None
    payload_ok: bool = False
    fabric_ops: int = 0
    copies: int = 0
    poll_discoveries: int = 0
    lock_retries: int = 0
    status: str = "PENDING"
    landed: bool = False
    released: bool = False

    @property
    def latency_ns(self) -> int | None:
        return None if self.end_ns is None else self.end_ns - self.start_ns


class RemoteLock:
    """Lock state kept at the destination; changed only by arriving lock messages."""

    def __init__(self, lock_id: int):
        self.lock_id = lock_id
        self.holder = None
        self.grants = 0

    def try_acquire(self, node) -> bool:
        if self.holder is None:
            self.holder = node
            self.grants += 1
            return True
        return False

    def release(self, node) -> None:
        if self.holder != node:
            raise errors.NotOwner(f"{node!r} released lock {self.lock_id} held by {self.holder!r}")
        self.holder = None


def _payload(seq: int, size: int) -> bytes:
    pattern = seq.to_bytes(4, "little") * (size // 4 + 1)
    return pattern[:size]


class PrimitiveBench:
    """Senders on their own nodes, one receiver node, one tenant."""

    def __init__(self, mode: TransferMode | str, senders=("A",), receiver="B",
                 link: LinkCost | None = None, cost: BaselineCost | None = None,
                 buffers: int = 64, buffer_size: int = 8192, staging_buffers: int = 8,
                 stall_on_full: bool = True):
        self.mode = TransferMode(mode)
        self.cost = cost or BaselineCost()
        self.receiver = receiver
        self.senders = list(senders)
        self.counters = Counters()
        self.pools = PoolRegistry(self.counters)
        self.fabric = Fabric(FabricConfig(cost=link or LinkCost(), one_sided=True, rnr_timeout_ns=None),
                             counters=self.counters)
        self.clock = self.fabric.clock
        self.stall_on_full = stall_on_full
        for node in self.senders + [receiver]:
            self.fabric.add_node(node)
            pool = self.pools.create_pool(TENANT, node, buffers, buffer_size)
            self.pools.import_pool(self.pools.export_pool(pool), f"engine-{node}")
            self.fabric.register_memory(pool, node)
        self.rx_pool = self.pools.get(TENANT, receiver)
        self.rx_owner = OwnerRef.engine(receiver)
        self.qps = {s: self.fabric.create_qp(TENANT, s, receiver) for s in self.senders}
        self.records: list[TransferRecord] = []
        self._seq = itertools.count()
        self._inflight: dict[tuple, TransferRecord] = {}
        # staging pool for OWRC: fabric-visible only, never mapped to functions
        self.staging = MemoryPool(TENANT, receiver, staging_buffers, buffer_size, self.counters,
                                  name_prefix="rdma_only")
        self.staging.mapping = CrossMapHandle(self.staging, f"engine-{receiver}", MapAccess.FABRIC_DELIVERY)
        self.staging_region = self.fabric.register_memory(self.staging, receiver, unified=False)
        self.staging_free = deque(range(staging_buffers))
        self.stalled: deque = deque()
        # OWDL: one lock per destination buffer, reserved up front in the unified pool
        self.locks: dict[int, RemoteLock] = {}
        self.owdl_target = self.rx_pool.alloc(self.rx_owner)
        for node in self.senders + [receiver]:
            self.fabric.nic(node).cq_listener = (lambda n=node: self._drain_cq(n))
        if self.mode is TransferMode.TWO_SIDED:
            rq = self.fabric.rq(TENANT, receiver)
            self._rbr = {}
            for d in self.rx_pool.alloc_many(self.rx_owner, buffers // 2):
                self._rbr[self.fabric.post_recv(rq, d, self.rx_owner)] = d
        self.clock.run(until=self.clock.now + self.fabric.config.cost.connect_delay_ns + NS_PER_MS)

    # -- public ----------------------------------------------------------------------------

    def submit(self, size: int, sender=None) -> TransferRecord:
        sender = sender or self.senders[0]
        seq = next(self._seq)
        rec = TransferRecord(self.mode, sender, seq, size, self.clock.now)
        self.records.append(rec)
        pool = self.pools.get(TENANT, sender)
        owner = OwnerRef.engine(sender)
        desc = pool.write(pool.alloc(owner), owner, _payload(seq, size))
        if self.mode is TransferMode.TWO_SIDED:
            self._two_sided(rec, desc)
        elif self.mode is TransferMode.OWDL:
            self._owdl_acquire(rec, desc, slot=self.owdl_target.buffer_id)
        else:
            self._owrc_start(rec, desc)
        return rec

    def run(self) -> None:
        self.clock.run()

    def run_sequential(self, n: int, size: int) -> list[TransferRecord]:
        """One message at a time, each after the previous completed."""
        out = []
        for _ in range(n):
            rec = self.submit(size)
            self.clock.run()
            out.append(rec)
        return out

    # -- two-sided ---------------------------------------------------------------------------

    def _two_sided(self, rec, desc) -> None:
        wr = self.fabric.new_wr(rec.sender, Opcode.SEND, desc)
        self._inflight[(rec.sender, wr.wr_id)] = (rec, desc)
        self.fabric.post_send(self.qps[rec.sender], wr)
        rec.fabric_ops += 1

    # -- OWRC ------------------------------------------------------------------------------

    def _owrc_start(self, rec, desc) -> None:
        if not self.staging_free:
            if not self.stall_on_full:
                rec.status = errors.RdmaPoolExhausted.code
                self.pools.get(TENANT, rec.sender).free(desc, OwnerRef.engine(rec.sender))
                raise errors.RdmaPoolExhausted("no free slot in the receiver's staging pool")
            self.stalled.append((rec, desc))
            return
        slot = self.staging_free.popleft()
        self._write(rec, desc, slot, self.staging_region, self.staging.buffer_size)

    def _write(self, rec, desc, slot, region, slot_size) -> None:
        wr = self.fabric.new_wr(rec.sender, Opcode.WRITE, desc, slot * slot_size)
        self._inflight[(rec.sender, wr.wr_id)] = (rec, desc)
        self.fabric.post_write(self.qps[rec.sender], wr, region=region)
        rec.fabric_ops += 1
        self._poll(rec, region, slot * slot_size, desc.length, slot)

    def _poll(self, rec, region, offset, length, slot) -> None:
        """Receiver-side poll loop on the arrival flag."""
        if self.fabric.poll_write_flag(region, offset, length):
            rec.poll_discoveries += 1
            self.counters.record_event("poll_discovery")
            if self.mode is TransferMode.OWDL:
                self._owdl_landed(rec, slot)
            else:
                self._owrc_copy(rec, region, offset, length, slot)
            return
        self.clock.call_later(self.cost.poll_interval_ns, self._poll, rec, region, offset, length, slot)

    def _owrc_copy(self, rec, region, offset, length, slot) -> None:
        factor = self.cost.worst_copy_factor if self.mode is TransferMode.OWRC_WORST else 1.0
        delay = round(self.cost.copy_ns_per_byte * length * factor)
        dst = self.rx_pool.alloc(self.rx_owner)
        dst = self.rx_pool.write(dst, self.rx_owner, self.fabric.region_view(region, offset, length),
                                 copy_site="owrc_copy")
        rec.copies += 1
        self.clock.call_later(delay, self._owrc_done, rec, dst, slot)

    def _owrc_done(self, rec, dst, slot) -> None:
        rec.payload_ok = bytes(self.rx_pool.read(dst, self.rx_owner)) == _payload(rec.seq, rec.size)
        self.rx_pool.free(dst, self.rx_owner)
        self._finish(rec)
        self.staging_free.append(slot)
        if self.stalled:
            nxt, desc = self.stalled.popleft()
            self._owrc_start(nxt, desc)

    # -- OWDL ------------------------------------------------------------------------------

    def _lock_hop(self) -> int:
        return self.fabric.config.cost.transfer_ns(LOCK_MSG_BYTES)

    def _owdl_acquire(self, rec, desc, slot) -> None:
        self.counters.record_op("lock_acquire")
        rec.fabric_ops += 1
        self.clock.call_later(self._lock_hop(), self._owdl_lock_request, rec, desc, slot)

    def _owdl_lock_request(self, rec, desc, slot) -> None:
        lock = self.locks.setdefault(slot, RemoteLock(slot))
        granted = lock.try_acquire(rec.sender)
        self.clock.call_later(self._lock_hop(), self._owdl_lock_reply, rec, desc, slot, granted)

    def _owdl_lock_reply(self, rec, desc, slot, granted) -> None:
        if granted:
            self._write(rec, desc, slot, self.rx_pool.region, self.rx_pool.buffer_size)
            return
        rec.lock_retries += 1
        self.counters.record_event("lock_retry")
        if rec.lock_retries > self.cost.lock_max_retries:
            rec.status = errors.LockTimeout.code
            self.pools.get(TENANT, rec.sender).free(desc, OwnerRef.engine(rec.sender))
            return
        backoff = self.cost.lock_backoff_ns * (2 ** min(rec.lock_retries - 1, 8))
        self.clock.call_later(backoff, self._owdl_acquire, rec, desc, slot)

    def _owdl_release(self, rec, slot) -> None:
        self.counters.record_op("lock_release")
        rec.fabric_ops += 1
        self.clock.call_later(self._lock_hop(), self._owdl_released, rec, slot)

    def _owdl_released(self, rec, slot) -> None:
        self.locks[slot].release(rec.sender)
        rec.released = True
        if rec.landed:
            self._owdl_consume(rec, slot)

    def _owdl_landed(self, rec, slot) -> None:
        rec.landed = True
        # the writer's release is what makes the buffer safe to consume
        if rec.released:
            self._owdl_consume(rec, slot)

    def _owdl_consume(self, rec, slot) -> None:
        view = self.fabric.region_view(self.rx_pool.region, slot * self.rx_pool.buffer_size, rec.size)
        rec.payload_ok = bytes(view) == _payload(rec.seq, rec.size)
        self._finish(rec)

    # -- completions -----------------------------------------------------------------------

    def _drain_cq(self, node) -> None:
        for cqe in self.fabric.poll_cq(node, 64):
            if cqe.direction is Direction.TX_DONE:
                rec, desc = self._inflight.pop((node, cqe.wr_id))
                self.pools.get(TENANT, node).free(desc, OwnerRef.engine(node))
                if cqe.status is not Status.OK:
                    rec.status = cqe.status.value
                elif self.mode is TransferMode.OWDL:
                    self._owdl_release(rec, self.owdl_target.buffer_id)
            else:
                d = self._rbr.pop(cqe.wr_id)
                rec = self.records[int.from_bytes(bytes(self.rx_pool.read(
                    d.replace(length=4), self.rx_owner)), "little")]
                got = bytes(self.rx_pool.read(d.replace(length=cqe.byte_len), self.rx_owner))
                rec.payload_ok = got == _payload(rec.seq, rec.size)
                self._finish(rec)
                rq = self.fabric.rq(TENANT, node)
                self._rbr[self.fabric.post_recv(rq, d.replace(length=0), self.rx_owner)] = d

    def _finish(self, rec) -> None:
        rec.end_ns = self.clock.now
        rec.status = "OK"


def compare_primitives(size: int = 4096, messages: int = 8, link: LinkCost | None = None,
                       cost: BaselineCost | None = None) -> dict[str, dict]:
    """Run each mode on a fresh bench; per-message latency and counter summary."""
    out = {}
    for mode in TransferMode:
        bench = PrimitiveBench(mode, link=link, cost=cost)
        recs = bench.run_sequential(messages, size)
        lat = [r.latency_ns for r in recs]
        out[mode.value] = {
            "latency_ns": lat,
            "mean_latency_ns": sum(lat) / len(lat),
            "fabric_ops_per_msg": sum(r.fabric_ops for r in recs) / len(recs),
            "copies_per_msg": sum(r.copies for r in recs) / len(recs),
            "poll_discoveries_per_msg": sum(r.poll_discoveries for r in recs) / len(recs),
            "payload_ok": all(r.payload_ok for r in recs),
            "software_copies": bench.counters.total_copies,
            "fabric_ops": dict(bench.counters.fabric_ops),
        }
    return out
