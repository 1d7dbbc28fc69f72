"""Cluster-wide accounting of copies, fabric operations and protocol violations."""
from __future__ import annotations

import threading
from collections import Counter
from dataclasses import dataclass, field


@dataclass
class Counters:
    # explicit payload copies made by software (engine, functions, ingress)
    copies: Counter = field(default_factory=Counter)
    copy_bytes: Counter = field(default_factory=Counter)
    # link-performed payload movement; modeled hardware DMA, never a copy
    dma_transfers: int = 0
    dma_bytes: int = 0
    fabric_ops: Counter = field(default_factory=Counter)
    violations: Counter = field(default_factory=Counter)
    events: Counter = field(default_factory=Counter)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def record_copy(self, site: str, nbytes: int) -> None:
        with self._lock:
            self.copies[site] += 1
            self.copy_bytes[site] += nbytes

    def record_dma(self, nbytes: int) -> None:
        with self._lock:
            self.dma_transfers += 1
            self.dma_bytes += nbytes

    def record_op(self, kind: str, n: int = 1) -> None:
        with self._lock:
            self.fabric_ops[kind] += n

    def record_violation(self, kind: str) -> None:
        with self._lock:
            self.violations[kind] += 1

    def record_event(self, kind: str, n: int = 1) -> None:
        with self._lock:
            self.events[kind] += n

    @property
    def total_copies(self) -> int:
        return sum(self.copies.values())

    @property
    def total_fabric_ops(self) -> int:
        return sum(self.fabric_ops.values())

    @property
    def total_violations(self) -> int:
        return sum(self.violations.values())

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "copies": dict(sorted(self.copies.items())),
                "copy_bytes": dict(sorted(self.copy_bytes.items())),
                "dma_transfers": self.dma_transfers,
                "dma_bytes": self.dma_bytes,
                "fabric_ops": dict(sorted(self.fabric_ops.items())),
                "violations": dict(sorted(self.violations.items())),
                "events": dict(sorted(self.events.items())),
            }
