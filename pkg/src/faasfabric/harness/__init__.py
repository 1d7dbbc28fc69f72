"""Scenario manifests, workload applications, runner, reports and CLI."""
from faasfabric.harness.cluster import Cluster, TenantSpec
from faasfabric.harness.config import ScenarioConfig, bundled_manifest, load_config, parse_config
from faasfabric.harness.report import emit_report, read_timeseries, summarize_timeseries
from faasfabric.harness.runner import (
    RunResult,
    colocated,
    fairness_summary,
    run_chain_workload,
    run_primitive,
    run_scenario,
)

__all__ = [
    "Cluster", "TenantSpec",
    "ScenarioConfig", "bundled_manifest", "load_config", "parse_config",
    "emit_report", "read_timeseries", "summarize_timeseries",
    "RunResult", "colocated", "fairness_summary", "run_chain_workload", "run_primitive", "run_scenario",
]
