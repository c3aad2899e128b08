"""Deterministic discrete-event simulation of an XChange network."""
from .adversaries import PROFILES, adversary_class
from .engine import LatencyModel, SimEvent, SimulationError, Simulator, Trace
from .metrics import MetricsCollector, MetricsLog
from .replay import TraceError, compute_metrics, load_trace, parse_trace
from .runner import RunResult, build_world, run, run_reps, write_outputs
from .scenario import Scenario, ScenarioError, load_scenario, parse_scenario, scenario_from_dict

__all__ = [
    "PROFILES", "adversary_class", "LatencyModel", "SimEvent", "SimulationError", "Simulator", "Trace",
    "MetricsCollector", "MetricsLog", "TraceError", "compute_metrics", "load_trace", "parse_trace", "RunResult",
    "build_world", "run", "run_reps", "write_outputs", "Scenario", "ScenarioError", "load_scenario",
    "parse_scenario", "scenario_from_dict",
]
