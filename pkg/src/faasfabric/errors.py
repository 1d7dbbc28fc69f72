"""Exception hierarchy shared by every layer of the dataplane.

Each exception carries a stable ``code`` string so that metrics, dead-letter
records and the CLI can report failures without depending on class names.
"""
from __future__ import annotations


class DataplaneError(Exception):
    code = "ERROR"

    def __init__(self, message: str = "", **details):
        super().__init__(message or self.code)
        self.details = details


# mempool
class DuplicatePool(DataplaneError):
    code = "DUPLICATE_POOL"


class ZeroCapacity(DataplaneError):
    code = "ZERO_CAPACITY"


class PoolExhausted(DataplaneError):
    code = "POOL_EXHAUSTED"


class TenantMismatch(DataplaneError):
    code = "TENANT_MISMATCH"


class NotOwner(DataplaneError):
    code = "NOT_OWNER"


class DoubleFree(DataplaneError):
    code = "DOUBLE_FREE"


class InvalidDescriptor(DataplaneError):
    code = "INVALID_DESCRIPTOR"


class MalformedBlob(DataplaneError):
    code = "MALFORMED_BLOB"


class AlreadyMapped(DataplaneError):
    code = "ALREADY_MAPPED"


# fabric
class DuplicateRegistration(DataplaneError):
    code = "DUPLICATE_REGISTRATION"


class UnknownPool(DataplaneError):
    code = "UNKNOWN_POOL"


class UnknownTenant(DataplaneError):
    code = "UNKNOWN_TENANT"


class UnknownNode(DataplaneError):
    code = "UNKNOWN_NODE"


class QpNotReady(DataplaneError):
    code = "QP_NOT_READY"


class QpSaturated(DataplaneError):
    code = "QP_SATURATED"


class OffsetOutOfRange(DataplaneError):
    code = "OFFSET_OUT_OF_RANGE"


class ModeDisabled(DataplaneError):
    code = "MODE_DISABLED"


class BadOpcode(DataplaneError):
    code = "BAD_OPCODE"


# dne
class NoRoute(DataplaneError):
    code = "NO_ROUTE"


class ActiveCapExceeded(DataplaneError):
    code = "ACTIVE_CAP_EXCEEDED"


class RbrMiss(DataplaneError):
    code = "RBR_MISS"


class UnknownDstFn(DataplaneError):
    code = "UNKNOWN_DST_FN"


# ipc
class DuplicateFn(DataplaneError):
    code = "DUPLICATE_FN"


class NotFound(DataplaneError):
    code = "NOT_FOUND"


class ChannelFull(DataplaneError):
    code = "CHANNEL_FULL"


class Disconnected(DataplaneError):
    code = "DISCONNECTED"


# baselines
class LockTimeout(DataplaneError):
    code = "LOCK_TIMEOUT"


class RdmaPoolExhausted(DataplaneError):
    code = "RDMA_POOL_EXHAUSTED"


# ingress
class HttpError(DataplaneError):
    code = "HTTP_ERROR"

    def __init__(self, status: int, reason: str):
        super().__init__(f"{status} {reason}")
        self.status = status
        self.reason = reason


class StaleResponse(DataplaneError):
    code = "STALE_RESPONSE"


# harness
class ConfigInvalid(DataplaneError):
    code = "CONFIG_INVALID"

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems
