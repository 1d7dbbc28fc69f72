"""Function-facing I/O: one send/recv pair whatever the peer's placement."""
from __future__ import annotations

import struct
from enum import Enum
from types import MappingProxyType
from typing import Mapping

from faasfabric import errors
from faasfabric.ipc import ComchChannel, Endpoint, NodeIpc, Side, Wait
from faasfabric.mempool import BufferDescriptor, MemoryPool, OwnerRef


# correlation prefix carried at the start of request and response payloads
REQUEST_ID = struct.Struct("<Q")


class Placement(str, Enum):
    LOCAL = "LOCAL"
    REMOTE = "REMOTE"


class FunctionContext:
    """Everything a function may touch: its pool, its endpoint, its engine channel
    and a read-only view of where its peers live."""

    def __init__(self, fn_id: int, tenant_id: int, node_id, ipc: NodeIpc,
                 intra_route: Mapping[int, Placement], owner: OwnerRef | None = None):
        self.fn_id = fn_id
        self.tenant_id = tenant_id
        self.node_id = node_id
        self.ipc = ipc
        self.owner = owner or OwnerRef.function(fn_id, tenant_id)
        # a live view when the control plane passes one in, else a frozen copy
        if not isinstance(intra_route, MappingProxyType):
            intra_route = MappingProxyType(dict(intra_route))
        self.intra_route = intra_route
        self.endpoint: Endpoint = ipc.lookup(fn_id)
        self.comch: ComchChannel = ipc.channel(fn_id)

    @property
    def pool(self) -> MemoryPool:
        return self.ipc.pools.get(self.tenant_id, self.node_id)

    # a function resolves descriptors only in its own tenant's pool, so a foreign
    # descriptor fails as TENANT_MISMATCH before any ownership check
    def read(self, desc: BufferDescriptor) -> memoryview:
        return self.pool.read(desc, self.owner)

    def write(self, desc: BufferDescriptor, data, offset: int = 0) -> BufferDescriptor:
        return self.pool.write(desc, self.owner, data, offset)

    def pending(self) -> int:
        return len(self.endpoint.inbound) + len(self.comch.to_function)

    def __repr__(self) -> str:
        return f"FunctionContext(fn={self.fn_id}, tenant={self.tenant_id}, node={self.node_id!r})"


def register_function(ipc: NodeIpc, fn_id: int, tenant_id: int,
                      intra_route: Mapping[int, Placement], capacity: int | None = None,
                      owner: OwnerRef | None = None) -> FunctionContext:
    owner = owner or OwnerRef.function(fn_id, tenant_id)
    if capacity is None:
        ipc.register_endpoint(fn_id, owner)
    else:
        ipc.register_endpoint(fn_id, owner, capacity)
    return FunctionContext(fn_id, tenant_id, ipc.node, ipc, intra_route, owner)


def io_send(ctx: FunctionContext, desc: BufferDescriptor, dst_fn: int, flags: int | None = None) -> BufferDescriptor:
    """Send ``desc`` to ``dst_fn``; the caller loses the buffer on success."""
    placement = Placement.LOCAL if dst_fn == ctx.fn_id else ctx.intra_route.get(dst_fn)
    if placement is None:
        raise errors.NotFound(f"function {ctx.fn_id} has no route to {dst_fn}")
    out = desc.replace(src_fn=ctx.fn_id, dst_fn=dst_fn,
                       flags=desc.flags if flags is None else flags)
    if placement is Placement.LOCAL:
        ctx.ipc.skmsg_send(out, ctx.owner)
    else:
        ctx.comch.send(Side.FUNCTION, out)
    return out


def io_recv(ctx: FunctionContext, wait: Wait = Wait.POLL, timeout: float | None = None) -> BufferDescriptor | None:
    """Next descriptor from local peers or the engine, oldest arrival first."""
    if wait is Wait.EVENT:
        cond = ctx.endpoint.notify.cond
        with cond:
            cond.wait_for(lambda: ctx.pending() > 0, timeout)
    local, remote = ctx.endpoint.inbound, ctx.comch.to_function
    a, b = local.head_seq(), remote.head_seq()
    if a is None and b is None:
        return None
    if b is None or (a is not None and a < b):
        return local.pop()
    return remote.pop()


def io_get_buffer(ctx: FunctionContext) -> BufferDescriptor:
    return ctx.pool.alloc(ctx.owner)


def io_put_buffer(ctx: FunctionContext, desc: BufferDescriptor) -> None:
    ctx.pool.free(desc, ctx.owner)
