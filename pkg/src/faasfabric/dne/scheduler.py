"""Tenant transmit schedulers.

Both schedulers work over the engine's per-tenant ``pending_tx`` FIFOs and use a
peek/commit protocol: ``peek`` names the next (tenant, descriptor) to transmit,
the engine tries to post it, then calls ``commit`` on success or ``block`` when
the tenant cannot transmit right now (no usable queue pair).
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

from faasfabric.mempool import BufferDescriptor

DEFAULT_QUANTUM_BASE = 2048


class SchedulerMode(str, Enum):
    DWRR = "DWRR"
    FCFS = "FCFS"


@dataclass
class TenantState:
    tenant_id: int
    weight: int = 1
    deficit: int = 0
    pending_tx: deque = field(default_factory=deque)
    cqe_consumed: int = 0
    reposted: int = 0
    emitted: int = 0
    emitted_bytes: int = 0

    def __post_init__(self):
        if self.weight < 1:
            raise ValueError(f"tenant {self.tenant_id}: weight must be a positive integer")


def cost_of(desc: BufferDescriptor) -> int:
    # zero-length messages still take a slot
    return max(desc.length, 1)


class DwrrScheduler:
    """Deficit weighted round robin, resumable across engine iterations.

    Tenants are visited in ascending id order. A visit to a backlogged tenant
    adds ``weight * quantum_base`` to its deficit once, then emits head
    descriptors while the deficit covers them. A tenant whose queue empties
    forfeits its deficit.
    """

    mode = SchedulerMode.DWRR

    def __init__(self, tenants: dict[int, TenantState], quantum_base: int = DEFAULT_QUANTUM_BASE):
        if quantum_base < 1:
            raise ValueError("quantum_base must be positive")
        self.tenants = tenants
        self.quantum_base = quantum_base
        self._order: list[int] = []
        self._pos = 0
        self._fresh = True  # current tenant has not been granted its quantum yet

    def on_enqueue(self, tenant_id: int) -> None:
        pass

    def _refresh_order(self) -> None:
        order = sorted(self.tenants)
        if order != self._order:
            current = self._order[self._pos] if self._order else None
            self._order = order
            self._pos = order.index(current) if current in order else 0

    def _advance(self) -> None:
        self._pos = (self._pos + 1) % len(self._order)
        self._fresh = True

    def peek(self, blocked: set[int] = frozenset()) -> tuple[TenantState, BufferDescriptor] | None:
        self._refresh_order()
        if not self._order:
            return None
        ready = [t for t in self._order if self.tenants[t].pending_tx and t not in blocked]
        if not ready:
            return None
        max_cost = max(cost_of(self.tenants[t].pending_tx[0]) for t in ready)
        # enough visits for the lightest ready tenant to afford the heaviest head
        limit = len(self._order) * (max_cost // self.quantum_base + 2)
        for _ in range(limit):
            ts = self.tenants[self._order[self._pos]]
            if not ts.pending_tx:
                ts.deficit = 0
                self._advance()
                continue
            if ts.tenant_id in blocked:
                self._advance()
                continue
            if self._fresh:
                ts.deficit += ts.weight * self.quantum_base
                self._fresh = False
            head = ts.pending_tx[0]
            if ts.deficit >= cost_of(head):
                return ts, head
            self._advance()
        raise AssertionError("DWRR failed to find an emission for a backlogged tenant")

    def commit(self, ts: TenantState) -> BufferDescriptor:
        desc = ts.pending_tx.popleft()
        ts.deficit -= cost_of(desc)
        if not ts.pending_tx:
            ts.deficit = 0
            self._advance()
        return desc

    def block(self, ts: TenantState) -> None:
        """The tenant cannot transmit now: it keeps its deficit and yields the turn."""
        self._advance()


class FcfsScheduler:
    """First come first served across all tenants."""

    mode = SchedulerMode.FCFS

    def __init__(self, tenants: dict[int, TenantState]):
        self.tenants = tenants
        self.arrivals: deque[int] = deque()

    def on_enqueue(self, tenant_id: int) -> None:
        self.arrivals.append(tenant_id)

    def peek(self, blocked: set[int] = frozenset()) -> tuple[TenantState, BufferDescriptor] | None:
        if not self.arrivals or self.arrivals[0] in blocked:
            # head-of-line blocking is part of the discipline
            return None
        ts = self.tenants[self.arrivals[0]]
        return ts, ts.pending_tx[0]

    def commit(self, ts: TenantState) -> BufferDescriptor:
        self.arrivals.popleft()
        return ts.pending_tx.popleft()

    def block(self, ts: TenantState) -> None:
        pass


def make_scheduler(mode: SchedulerMode | str, tenants: dict[int, TenantState],
                   quantum_base: int = DEFAULT_QUANTUM_BASE):
    mode = SchedulerMode(mode)
    if mode is SchedulerMode.FCFS:
        return FcfsScheduler(tenants)
    return DwrrScheduler(tenants, quantum_base)


def dwrr_schedule(tenants: Iterable[tuple[int, int, Sequence[int]]],
                  quantum_base: int = DEFAULT_QUANTUM_BASE,
                  limit: int | None = None) -> list[tuple[int, int]]:
    """Emission order for static queues.

    ``tenants`` holds ``(tenant_id, weight, message_lengths)``; the result lists
    ``(tenant_id, index_in_queue)`` in emission order, at most ``limit`` long.
    """
    states = {}
    for tid, weight, lengths in tenants:
        ts = TenantState(tid, weight)
        ts.pending_tx.extend(BufferDescriptor(0, i, n) for i, n in enumerate(lengths))
        states[tid] = ts
    sched = DwrrScheduler(states, quantum_base)
    out = []
    while limit is None or len(out) < limit:
        pick = sched.peek()
        if pick is None:
            break
        ts, _ = pick
        out.append((ts.tenant_id, sched.commit(ts).buffer_id))
    return out
