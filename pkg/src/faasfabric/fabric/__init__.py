"""Emulated RDMA fabric: verbs over a virtual-time or socket link backend."""
from faasfabric.fabric.links import Backend, LinkCost
from faasfabric.fabric.verbs import (
    CompletionEntry,
    Direction,
    Fabric,
    FabricConfig,
    MemoryRegionHandle,
    Nic,
    Opcode,
    QpState,
    QueuePair,
    ReceiveQueue,
    Status,
    WorkRequest,
)

__all__ = [
    "Backend", "CompletionEntry", "Direction", "Fabric", "FabricConfig", "LinkCost",
    "MemoryRegionHandle", "Nic", "Opcode", "QpState", "QueuePair", "ReceiveQueue",
    "Status", "WorkRequest",
]
