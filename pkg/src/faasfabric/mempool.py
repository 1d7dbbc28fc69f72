"""Per-tenant pools of fixed-size buffers with exclusive-ownership descriptors.

A buffer is only ever reachable through a :class:`BufferDescriptor`; every
read, write, hand-off and recycle is checked against the buffer's single
``owner`` field. Rejected attempts are counted in :class:`Counters` so that
property tests can observe them instead of crashing the process.
"""
from __future__ import annotations

import hashlib
import json
import struct
import threading
from dataclasses import dataclass
from enum import IntEnum, IntFlag

from faasfabric import errors
from faasfabric.counters import Counters

DEFAULT_BUFFER_SIZE = 2 * 1024 * 1024  # one hugepage per buffer


class OwnerKind(IntEnum):
    POOL = 0
    FUNCTION = 1
    ENGINE = 2
    FABRIC = 3
    INGRESS_WORKER = 4


@dataclass(frozen=True)
class OwnerRef:
    kind: OwnerKind
    ident: object = None
    tenant: int | None = None  # set for FUNCTION owners only

    @classmethod
    def function(cls, fn_id: int, tenant: int) -> "OwnerRef":
        return cls(OwnerKind.FUNCTION, fn_id, tenant)

    @classmethod
    def engine(cls, node_id) -> "OwnerRef":
        return cls(OwnerKind.ENGINE, node_id)

    @classmethod
    def ingress(cls, worker_id: int) -> "OwnerRef":
        return cls(OwnerKind.INGRESS_WORKER, worker_id)

    def __str__(self) -> str:
        if self.kind in (OwnerKind.POOL, OwnerKind.FABRIC):
            return self.kind.name
        return f"{self.kind.name}({self.ident})"


POOL = OwnerRef(OwnerKind.POOL)
FABRIC = OwnerRef(OwnerKind.FABRIC)


class DescFlags(IntFlag):
    NONE = 0
    REQUEST = 0x1
    RESPONSE = 0x2
    OWDL = 0x10
    OWRC = 0x20


_DESC = struct.Struct("<HIIHHH")
DESCRIPTOR_SIZE = _DESC.size
assert DESCRIPTOR_SIZE == 16


@dataclass(frozen=True)
class BufferDescriptor:
    """16-byte token: tenant, buffer id, payload length, source/destination function, flags."""

    tenant_id: int
    buffer_id: int
    length: int = 0
    src_fn: int = 0
    dst_fn: int = 0
    flags: int = 0

    def pack(self) -> bytes:
        try:
            return _DESC.pack(self.tenant_id, self.buffer_id, self.length,
                              self.src_fn, self.dst_fn, self.flags)
        except struct.error as exc:
            raise errors.InvalidDescriptor(str(exc)) from None

    @classmethod
    def unpack(cls, raw: bytes) -> "BufferDescriptor":
        if len(raw) != DESCRIPTOR_SIZE:
            raise errors.InvalidDescriptor(f"descriptor must be 16 bytes, got {len(raw)}")
        return cls(*_DESC.unpack(raw))

    def replace(self, **changes) -> "BufferDescriptor":
        fields = {**self.__dict__, **changes}
        return BufferDescriptor(fields["tenant_id"], fields["buffer_id"], fields["length"],
                                fields["src_fn"], fields["dst_fn"], fields["flags"])


@dataclass
class Buffer:
    buffer_id: int
    tenant_id: int
    capacity: int
    owner: OwnerRef = POOL
    length: int = 0
    payload: bytearray | None = None  # materialized on first write

    def storage(self) -> bytearray:
        if self.payload is None:
            self.payload = bytearray(self.capacity)
        return self.payload


class MemoryPool:
    """Fixed arena of ``buffer_count`` equal-size buffers with a LIFO free list."""

    def __init__(self, tenant_id: int, node_id, buffer_count: int, buffer_size: int,
                 counters: Counters | None = None, name_prefix: str | None = None):
        if buffer_count < 1 or buffer_size < 1:
            raise errors.ZeroCapacity(f"pool for tenant {tenant_id} on {node_id} has no capacity")
        self.tenant_id = tenant_id
        self.node_id = node_id
        self.buffer_count = buffer_count
        self.buffer_size = buffer_size
        self.name_prefix = name_prefix or f"tenant_{tenant_id}"
        self.counters = counters if counters is not None else Counters()
        self.buffers = [Buffer(i, tenant_id, buffer_size) for i in range(buffer_count)]
        # LIFO: the most recently recycled (cache-warm) buffer is handed out first
        self.free_list = list(range(buffer_count - 1, -1, -1))
        self.mapping: CrossMapHandle | None = None
        self.region = None  # set by fabric.register_memory
        self.access_log: list[tuple] | None = None
        self._lock = threading.Lock()

    def __repr__(self) -> str:
        return (f"MemoryPool(tenant={self.tenant_id}, node={self.node_id!r}, "
                f"free={len(self.free_list)}/{self.buffer_count})")

    @property
    def extent(self) -> int:
        return self.buffer_count * self.buffer_size

    @property
    def free_count(self) -> int:
        return len(self.free_list)

    def owner_histogram(self) -> dict[str, int]:
        hist: dict[str, int] = {}
        for buf in self.buffers:
            key = buf.owner.kind.name
            hist[key] = hist.get(key, 0) + 1
        return hist

    def check_conservation(self) -> bool:
        owned = sum(1 for b in self.buffers if b.owner != POOL)
        free_set = set(self.free_list)
        return (len(free_set) == len(self.free_list)
                and self.free_count + owned == self.buffer_count
                and all(self.buffers[i].owner == POOL for i in free_set))

    # -- resolution and guards ---------------------------------------------------------

    def resolve(self, desc: BufferDescriptor) -> Buffer:
        if desc.tenant_id != self.tenant_id:
            self.counters.record_violation("cross_tenant")
            raise errors.TenantMismatch(
                f"descriptor of tenant {desc.tenant_id} presented to pool of tenant {self.tenant_id}")
        if not 0 <= desc.buffer_id < self.buffer_count:
            self.counters.record_violation("forged_descriptor")
            raise errors.InvalidDescriptor(f"buffer id {desc.buffer_id} out of range")
        if desc.length > self.buffer_size:
            self.counters.record_violation("forged_descriptor")
            raise errors.InvalidDescriptor(f"length {desc.length} exceeds capacity {self.buffer_size}")
        return self.buffers[desc.buffer_id]

    def _require_owner(self, buf: Buffer, who: OwnerRef, op: str) -> None:
        allowed = buf.owner == who
        if self.access_log is not None:
            self.access_log.append((buf.buffer_id, str(who), op, allowed))
        if not allowed:
            self.counters.record_violation("not_owner" if op != "access" else "access")
            raise errors.NotOwner(f"{who} attempted {op} on buffer {buf.buffer_id} owned by {buf.owner}")

    def _check_requester(self, requester: OwnerRef) -> None:
        if requester.kind in (OwnerKind.POOL, OwnerKind.FABRIC):
            raise errors.NotOwner(f"{requester} cannot allocate")
        if requester.kind == OwnerKind.FUNCTION and requester.tenant != self.tenant_id:
            self.counters.record_violation("cross_tenant")
            raise errors.TenantMismatch(
                f"function of tenant {requester.tenant} allocating from tenant {self.tenant_id}")

    # -- allocation --------------------------------------------------------------------

    def alloc(self, requester: OwnerRef) -> BufferDescriptor:
        self._check_requester(requester)
        with self._lock:
            if not self.free_list:
                raise errors.PoolExhausted(f"pool of tenant {self.tenant_id} on {self.node_id} exhausted")
            buf = self.buffers[self.free_list.pop()]
            buf.owner = requester
            buf.length = 0
        return BufferDescriptor(self.tenant_id, buf.buffer_id, 0)

    def alloc_many(self, requester: OwnerRef, n: int) -> list[BufferDescriptor]:
        """Allocate up to ``n`` buffers; returns fewer when the pool runs dry."""
        self._check_requester(requester)
        out = []
        with self._lock:
            while len(out) < n and self.free_list:
                buf = self.buffers[self.free_list.pop()]
                buf.owner = requester
                buf.length = 0
                out.append(BufferDescriptor(self.tenant_id, buf.buffer_id, 0))
        return out

    def free(self, desc: BufferDescriptor, releaser: OwnerRef) -> None:
        buf = self.resolve(desc)
        with self._lock:
            if buf.owner == POOL:
                self.counters.record_violation("double_free")
                raise errors.DoubleFree(f"buffer {buf.buffer_id} of tenant {self.tenant_id} already free")
            self._require_owner(buf, releaser, "free")
            buf.owner = POOL
            buf.length = 0
            self.free_list.append(buf.buffer_id)

    def transfer(self, desc: BufferDescriptor, src: OwnerRef, dst: OwnerRef) -> None:
        buf = self.resolve(desc)
        if dst == POOL:
            raise errors.NotOwner("use free() to return a buffer to its pool")
        with self._lock:
            self._require_owner(buf, src, "transfer")
            buf.owner = dst

    def owner_of(self, desc: BufferDescriptor) -> OwnerRef:
        return self.resolve(desc).owner

    # -- guarded payload access ----------------------------------------------------------

    def read(self, desc: BufferDescriptor, who: OwnerRef) -> memoryview:
        """Zero-copy read-only view of the first ``desc.length`` bytes."""
        buf = self.resolve(desc)
        self._require_owner(buf, who, "access")
        if buf.payload is None:
            return memoryview(b"\x00" * desc.length)
        return memoryview(buf.payload).toreadonly()[:desc.length]

    def write(self, desc: BufferDescriptor, who: OwnerRef, data, offset: int = 0,
              copy_site: str | None = None) -> BufferDescriptor:
        """Write into the buffer and return the descriptor with its new length.

        ``copy_site`` marks the write as a software payload copy (for example the
        ingress boundary copy); application-generated content passes ``None``.
        """
        buf = self.resolve(desc)
        self._require_owner(buf, who, "access")
        end = offset + len(data)
        if offset < 0 or end > buf.capacity:
            raise errors.InvalidDescriptor(f"write of {len(data)} bytes at {offset} exceeds capacity")
        buf.storage()[offset:end] = data
        buf.length = max(desc.length, end)
        if copy_site is not None:
            self.counters.record_copy(copy_site, len(data))
        return desc.replace(length=buf.length)

    def dma_write(self, desc: BufferDescriptor, data) -> BufferDescriptor:
        """Link-performed delivery into a buffer held by the fabric (modeled DMA)."""
        buf = self.resolve(desc)
        self._require_owner(buf, FABRIC, "access")
        n = len(data)
        if n > buf.capacity:
            raise errors.InvalidDescriptor(f"delivery of {n} bytes exceeds capacity {buf.capacity}")
        buf.storage()[:n] = data
        buf.length = n
        self.counters.record_dma(n)
        return desc.replace(length=n)

    def dma_read(self, desc: BufferDescriptor) -> memoryview:
        buf = self.resolve(desc)
        self._require_owner(buf, FABRIC, "access")
        if buf.payload is None:
            return memoryview(b"\x00" * desc.length)
        return memoryview(buf.payload).toreadonly()[:desc.length]


class MapAccess(IntFlag):
    ENGINE_CORE = 1
    FABRIC_DELIVERY = 2


@dataclass
class CrossMapHandle:
    """Engine-side view of a host pool, obtained through the export/import handshake."""

    pool: MemoryPool
    exported_to: object
    access: MapAccess = MapAccess.ENGINE_CORE | MapAccess.FABRIC_DELIVERY

    def read(self, desc: BufferDescriptor, who: OwnerRef) -> memoryview:
        return self.pool.read(desc, who)


_BLOB_MAGIC = b"XMAP1"


class PoolRegistry:
    """All pools of a deployment, keyed by (tenant, node)."""

    def __init__(self, counters: Counters | None = None):
        self.counters = counters if counters is not None else Counters()
        self._pools: dict[tuple, MemoryPool] = {}

    def create_pool(self, tenant_id: int, node_id, buffer_count: int,
                    buffer_size: int = DEFAULT_BUFFER_SIZE) -> MemoryPool:
        key = (tenant_id, node_id)
        if key in self._pools:
            raise errors.DuplicatePool(f"tenant {tenant_id} already has a pool on {node_id}")
        pool = MemoryPool(tenant_id, node_id, buffer_count, buffer_size, self.counters)
        self._pools[key] = pool
        return pool

    def get(self, tenant_id: int, node_id) -> MemoryPool:
        try:
            return self._pools[(tenant_id, node_id)]
        except KeyError:
            raise errors.UnknownPool(f"no pool for tenant {tenant_id} on {node_id}") from None

    def pools(self) -> list[MemoryPool]:
        return list(self._pools.values())

    def on_node(self, node_id) -> list[MemoryPool]:
        return [p for (t, n), p in self._pools.items() if n == node_id]

    def resolve(self, node_id, desc: BufferDescriptor) -> tuple[MemoryPool, Buffer]:
        pool = self._pools.get((desc.tenant_id, node_id))
        if pool is None:
            self.counters.record_violation("cross_tenant")
            raise errors.TenantMismatch(f"tenant {desc.tenant_id} has no pool on {node_id}")
        return pool, pool.resolve(desc)

    # -- cross-processor map handshake ---------------------------------------------------------

    def export_pool(self, pool: MemoryPool) -> bytes:
        if self._pools.get((pool.tenant_id, pool.node_id)) is not pool:
            raise errors.UnknownPool("pool is not part of this registry")
        manifest = {
            "tenant": pool.tenant_id,
            "node": pool.node_id,
            "prefix": pool.name_prefix,
            "count": pool.buffer_count,
            "size": pool.buffer_size,
        }
        body = json.dumps(manifest, sort_keys=True).encode()
        digest = hashlib.sha256(_BLOB_MAGIC + body).digest()[:8]
        return _BLOB_MAGIC + body + digest

    def import_pool(self, blob: bytes, engine) -> CrossMapHandle:
        if len(blob) < len(_BLOB_MAGIC) + 8 or not blob.startswith(_BLOB_MAGIC):
            raise errors.MalformedBlob("missing export header")
        body, digest = blob[len(_BLOB_MAGIC):-8], blob[-8:]
        if hashlib.sha256(_BLOB_MAGIC + body).digest()[:8] != digest:
            raise errors.MalformedBlob("export checksum mismatch")
        try:
            manifest = json.loads(body)
            pool = self._pools[(manifest["tenant"], manifest["node"])]
        except (ValueError, KeyError, TypeError):
            raise errors.MalformedBlob("export names no known pool") from None
        if (pool.name_prefix, pool.buffer_count, pool.buffer_size) != (
                manifest["prefix"], manifest["count"], manifest["size"]):
            raise errors.MalformedBlob("export does not match the pool layout")
        if pool.mapping is not None:
            raise errors.AlreadyMapped(f"pool {pool.name_prefix} already mapped by {pool.mapping.exported_to}")
        pool.mapping = CrossMapHandle(pool, engine)
        return pool.mapping
