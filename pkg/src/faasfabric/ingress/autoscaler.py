"""Worker-count control with a hysteresis band on average utilization."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

from faasfabric.clock import NS_PER_S


class ScaleAction(IntEnum):
    RETIRE = -1
    NONE = 0
    SPAWN = 1


@dataclass
class AutoscalerConfig:
    min_workers: int = 1
    max_workers: int = 8
    up_threshold: float = 0.60
    down_threshold: float = 0.30
    window_ns: int = NS_PER_S
    abrupt_retire: bool = False

    def __post_init__(self):
        if not 1 <= self.min_workers <= self.max_workers:
            raise ValueError("need 1 <= min_workers <= max_workers")
        if not 0 <= self.down_threshold < self.up_threshold <= 1:
            raise ValueError("need 0 <= down_threshold < up_threshold <= 1")


@dataclass
class Autoscaler:
    config: AutoscalerConfig = field(default_factory=AutoscalerConfig)
    worker_count: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.worker_count == 0:
            self.worker_count = self.config.min_workers

    def decide(self, avg_utilization: float) -> ScaleAction:
        cfg = self.config
        # spawn when utilization reaches the upper bound, retire once it drops below the lower
        if avg_utilization >= cfg.up_threshold and self.worker_count < cfg.max_workers:
            return ScaleAction.SPAWN
        if avg_utilization < cfg.down_threshold and self.worker_count > cfg.min_workers:
            return ScaleAction.RETIRE
        return ScaleAction.NONE

    def tick(self, utilizations) -> ScaleAction:
        """One window's samples (busy fraction per live worker); applies at most one step."""
        utilizations = list(utilizations)
        avg = sum(utilizations) / len(utilizations) if utilizations else 0.0
        action = self.decide(avg)
        self.worker_count += int(action)
        self.history.append((avg, action, self.worker_count))
        return action
