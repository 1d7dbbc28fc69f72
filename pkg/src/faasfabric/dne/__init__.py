"""Node-local network engine: scheduling, routing, queue-pair pool and receive reposting."""
from faasfabric.dne.connpool import ConnectionPool
from faasfabric.dne.engine import (DeadLetter, Engine, EngineConfig, EngineCost, IterationReport,
                                   active_qps_have_work)
from faasfabric.dne.scheduler import (DwrrScheduler, FcfsScheduler, SchedulerMode, TenantState,
                                      dwrr_schedule, make_scheduler)

__all__ = [
    "ConnectionPool", "DeadLetter", "DwrrScheduler", "Engine", "EngineConfig", "EngineCost",
    "FcfsScheduler", "IterationReport", "SchedulerMode", "TenantState", "active_qps_have_work",
    "dwrr_schedule", "make_scheduler",
]
