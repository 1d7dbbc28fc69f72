"""Per-peer pools of pre-established RC queue pairs, activated on demand."""
from __future__ import annotations

from faasfabric import errors
from faasfabric.fabric import QpState, QueuePair

DEFAULT_ACTIVE_CAP = 32


class ConnectionPool:
    """All queue pairs from one engine towards one peer node, across tenants.

    Idle queue pairs sit INACTIVE. A send goes to the least-loaded ACTIVE queue
    pair of its tenant; another one is activated only when every ACTIVE one is
    saturated, and never beyond ``active_cap`` ACTIVE queue pairs per peer.
    """

    def __init__(self, peer, active_cap: int = DEFAULT_ACTIVE_CAP, max_outstanding: int = 64):
        if active_cap < 1:
            raise ValueError("active_cap must be at least 1")
        self.peer = peer
        self.active_cap = active_cap
        self.max_outstanding = max_outstanding
        self.by_tenant: dict[int, list[QueuePair]] = {}
        self.activations = 0
        self._all: list[QueuePair] = []

    def add(self, qp: QueuePair) -> None:
        qps = self.by_tenant.setdefault(qp.tenant_id, [])
        qps.append(qp)
        qps.sort(key=lambda q: q.qp_id)
        self._all = sorted(self._all + [qp], key=lambda q: q.qp_id)

    def all_qps(self) -> list[QueuePair]:
        return list(self._all)

    def active_count(self) -> int:
        return sum(1 for q in self._all if q.state is QpState.ACTIVE)

    def select(self, tenant_id: int) -> QueuePair:
        """Pick the queue pair for the next send of ``tenant_id``; may activate one."""
        qps = self.by_tenant.get(tenant_id)
        if not qps:
            raise errors.NoRoute(f"no queue pair for tenant {tenant_id} towards {self.peer!r}")
        ready = [q for q in qps if q.state is not QpState.CONNECTING]
        if not ready:
            raise errors.QpNotReady(f"queue pairs of tenant {tenant_id} towards {self.peer!r} still connecting")
        usable = [q for q in ready if q.state is QpState.ACTIVE and q.outstanding < self.max_outstanding]
        if usable:
            return min(usable, key=lambda q: (q.outstanding, q.qp_id))
        inactive = [q for q in ready if q.state is QpState.INACTIVE]
        if not inactive:
            raise errors.QpSaturated(f"all queue pairs of tenant {tenant_id} towards {self.peer!r} saturated")
        if self.active_count() >= self.active_cap:
            raise errors.ActiveCapExceeded(
                f"{self.active_cap} queue pairs already active towards {self.peer!r}")
        qp = inactive[0]
        qp.state = QpState.ACTIVE
        self.activations += 1
        return qp

    def deactivate_idle(self) -> int:
        n = 0
        for qp in self._all:
            if qp.state is QpState.ACTIVE and not qp.has_work:
                qp.state = QpState.INACTIVE
                n += 1
        return n
