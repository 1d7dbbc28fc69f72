"""Intra-node descriptor transport.

Two channel kinds move 16-byte descriptors, never payloads:

* function endpoints, looked up by function id in a per-node registry
  (the sockmap analogue used for function-to-function hand-off), and
* one bidirectional engine channel per function, busy-polled by the engine and
  event-waited by the function.

Ownership of the referenced buffer moves with the descriptor at send time.
"""
from __future__ import annotations

import itertools
import threading
from collections import deque
from enum import Enum
from typing import Callable

from faasfabric import errors
from faasfabric.mempool import BufferDescriptor, OwnerKind, OwnerRef, PoolRegistry

DEFAULT_CAPACITY = 1024


class Wait(str, Enum):
    POLL = "POLL"
    EVENT = "EVENT"


class Side(str, Enum):
    FUNCTION = "FUNCTION"
    ENGINE = "ENGINE"


class Notifier:
    """Readiness signal for one function: a condition plus optional callbacks."""

    def __init__(self) -> None:
        self.cond = threading.Condition()
        self.listeners: list[Callable[[], None]] = []

    def raise_(self) -> None:
        with self.cond:
            self.cond.notify_all()
        for listener in self.listeners:
            listener()


class _Fifo:
    """Bounded FIFO of (arrival_seq, packed descriptor)."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.items: deque[tuple[int, bytes]] = deque()
        self.bytes_moved = 0
        self.messages = 0

    def __len__(self) -> int:
        return len(self.items)

    def full(self) -> bool:
        return len(self.items) >= self.capacity

    def push(self, seq: int, raw: bytes) -> None:
        self.items.append((seq, raw))
        self.bytes_moved += len(raw)
        self.messages += 1

    def head_seq(self) -> int | None:
        return self.items[0][0] if self.items else None

    def pop(self) -> BufferDescriptor | None:
        if not self.items:
            return None
        return BufferDescriptor.unpack(self.items.popleft()[1])


class Endpoint:
    def __init__(self, node, fn_id: int, owner: OwnerRef, capacity: int, notifier: Notifier):
        self.node = node
        self.fn_id = fn_id
        self.owner = owner
        self.inbound = _Fifo(capacity)
        self.notify = notifier

    @property
    def tenant(self) -> int | None:
        return self.owner.tenant

    def __repr__(self) -> str:
        return f"Endpoint(fn={self.fn_id}, node={self.node!r}, queued={len(self.inbound)})"


def _check_tenant(ep: Endpoint, descriptor: BufferDescriptor) -> None:
    if ep.owner.kind is OwnerKind.FUNCTION and ep.owner.tenant != descriptor.tenant_id:
        raise errors.TenantMismatch(
            f"function {ep.fn_id} of tenant {ep.owner.tenant} cannot take tenant {descriptor.tenant_id} buffers")


class ComchChannel:
    """Bidirectional function<->engine channel; one per registered function."""

    def __init__(self, ipc: "NodeIpc", endpoint: Endpoint, capacity: int):
        self._ipc = ipc
        self.endpoint = endpoint
        self.fn_id = endpoint.fn_id
        self.to_engine = _Fifo(capacity)
        self.to_function = _Fifo(capacity)
        self.connected = True

    def disconnect(self) -> None:
        """Sever the channel; later sends from either side fail with DISCONNECTED."""
        self.connected = False

    def send(self, side: Side, descriptor: BufferDescriptor) -> None:
        if not self.connected:
            raise errors.Disconnected(f"channel of function {self.fn_id} was severed")
        pool = self._ipc.pools.get(descriptor.tenant_id, self._ipc.node)
        engine = OwnerRef.engine(self._ipc.node)
        if side is Side.FUNCTION:
            fifo, src, dst = self.to_engine, self.endpoint.owner, engine
        else:
            fifo, src, dst = self.to_function, engine, self.endpoint.owner
        if side is Side.ENGINE:
            _check_tenant(self.endpoint, descriptor)
        if fifo.full():
            raise errors.ChannelFull(f"channel of function {self.fn_id} is full ({side.value} side)")
        raw = descriptor.pack()
        pool.transfer(descriptor, src, dst)
        fifo.push(self._ipc.next_arrival(), raw)
        if side is Side.FUNCTION:
            if self._ipc.engine_listener is not None:
                self._ipc.engine_listener()
        else:
            self.endpoint.notify.raise_()

    def recv(self, side: Side, wait: Wait = Wait.POLL, timeout: float | None = None) -> BufferDescriptor | None:
        if side is Side.ENGINE:
            # the engine never blocks inside its loop
            return self.to_engine.pop()
        fifo = self.to_function
        if wait is Wait.EVENT:
            with self.endpoint.notify.cond:
                self.endpoint.notify.cond.wait_for(lambda: len(fifo) > 0, timeout)
        return fifo.pop()


class NodeIpc:
    """Endpoint registry of one node: fn_id -> endpoint and engine channel."""

    def __init__(self, node, pools: PoolRegistry):
        self.node = node
        self.pools = pools
        self.endpoints: dict[int, Endpoint] = {}
        self.channels: dict[int, ComchChannel] = {}
        self._ordered: list[ComchChannel] = []
        # wakes the node's engine when a function queues work for it
        self.engine_listener: Callable[[], None] | None = None
        self._arrivals = itertools.count()
        self._lock = threading.Lock()

    def next_arrival(self) -> int:
        with self._lock:
            return next(self._arrivals)

    def register_endpoint(self, fn_id: int, owner: OwnerRef, capacity: int = DEFAULT_CAPACITY) -> Endpoint:
        if fn_id in self.endpoints:
            raise errors.DuplicateFn(f"function {fn_id} already registered on {self.node!r}")
        ep = Endpoint(self.node, fn_id, owner, capacity, Notifier())
        self.endpoints[fn_id] = ep
        self.channels[fn_id] = ComchChannel(self, ep, capacity)
        self._ordered = [self.channels[f] for f in sorted(self.channels)]
        return ep

    def lookup(self, fn_id: int) -> Endpoint:
        try:
            return self.endpoints[fn_id]
        except KeyError:
            raise errors.NotFound(f"function {fn_id} is not registered on {self.node!r}") from None

    def channel(self, fn_id: int) -> ComchChannel:
        try:
            return self.channels[fn_id]
        except KeyError:
            raise errors.NotFound(f"function {fn_id} has no engine channel on {self.node!r}") from None

    def ordered_channels(self) -> list[ComchChannel]:
        """Engine channels in function-id order (the engine's drain order)."""
        return self._ordered

    def skmsg_send(self, descriptor: BufferDescriptor, sender: OwnerRef) -> None:
        """Hand a descriptor to the co-located function named by ``descriptor.dst_fn``."""
        ep = self.lookup(descriptor.dst_fn)
        _check_tenant(ep, descriptor)
        if ep.inbound.full():
            raise errors.ChannelFull(f"endpoint of function {ep.fn_id} is full")
        raw = descriptor.pack()
        self.pools.get(descriptor.tenant_id, self.node).transfer(descriptor, sender, ep.owner)
        ep.inbound.push(self.next_arrival(), raw)
        ep.notify.raise_()
