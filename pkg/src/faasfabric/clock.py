"""Time sources: a discrete-event virtual clock and a wall clock.

All times are integer nanoseconds so that simulated runs are bit-reproducible.
"""
from __future__ import annotations

import heapq
import itertools
import time
from collections import deque
from typing import Callable

NS_PER_US = 1_000
NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000


class SimClock:
    """Single-threaded event queue ordered by (virtual_time, insertion order)."""

    def __init__(self) -> None:
        self.now = 0
        self._queue: list = []
        self._seq = itertools.count()

    def call_at(self, when: int, fn: Callable, *args) -> None:
        if when < self.now:
            when = self.now
        heapq.heappush(self._queue, (when, next(self._seq), fn, args))

    def call_later(self, delay: int, fn: Callable, *args) -> None:
        self.call_at(self.now + delay, fn, *args)

    def pending(self) -> int:
        return len(self._queue)

    def next_time(self) -> int | None:
        return self._queue[0][0] if self._queue else None

    def step(self) -> bool:
        if not self._queue:
            return False
        when, _, fn, args = heapq.heappop(self._queue)
        self.now = when
        fn(*args)
        return True

    def run(self, until: int | None = None, max_events: int | None = None) -> int:
        """Process events up to and including ``until``; returns events run."""
        n = 0
        q = self._queue
        while q:
            if until is not None and q[0][0] > until:
                break
            if max_events is not None and n >= max_events:
                break
            when, _, fn, args = heapq.heappop(q)
            self.now = when
            fn(*args)
            n += 1
        if until is not None and self.now < until and (not q or q[0][0] > until):
            self.now = until
        return n


class SerialServer:
    """A run-to-completion loop on the virtual clock.

    Items run one at a time in submission order. An item runs when it reaches
    the head and returns its service cost; the loop stays busy for that long, and
    effects registered with :meth:`defer` become visible when the service ends.
    """

    def __init__(self, clock: SimClock):
        self.clock = clock
        self.queue: deque = deque()
        self.busy_ns = 0
        self.items = 0
        self._running = False
        self._deferred: list = []

    def submit(self, fn: Callable, *args) -> None:
        self.queue.append((fn, args))
        if not self._running:
            self._running = True
            self.clock.call_later(0, self._next)

    def defer(self, fn: Callable, *args) -> None:
        self._deferred.append((fn, args))

    def _next(self) -> None:
        if not self.queue:
            self._running = False
            return
        fn, args = self.queue.popleft()
        cost = fn(*args) or 0
        self.busy_ns += cost
        self.items += 1
        for dfn, dargs in self._deferred:
            self.clock.call_later(cost, dfn, *dargs)
        self._deferred.clear()
        self.clock.call_later(cost, self._next)


class WallClock:
    """Monotonic wall time in nanoseconds, for the socket backend."""

    def __init__(self) -> None:
        self._origin = time.monotonic_ns()

    @property
    def now(self) -> int:
        return time.monotonic_ns() - self._origin
