"""Deterministic discrete-event simulation of dependability in large-scale
distributed systems: regional centers, networks, faults, fault-tolerant
scheduling and a virtual-organization security model."""

from .engine import Distribution, Engine, SeededRng, sample
from .faults import FaultInjector, FaultKind, FaultProfile, Monitor
from .metrics import MetricsStore, RunReport
from .resources import Grid
from .scenario import ScenarioConfig, export, load_scenario, parse_scenario, run, write_scenario
from .workload import Dag, Job, JobState, Scheduler

__all__ = [
    "Dag", "Distribution", "Engine", "FaultInjector", "FaultKind", "FaultProfile", "Grid", "Job",
    "JobState", "MetricsStore", "Monitor", "RunReport", "ScenarioConfig", "Scheduler", "SeededRng",
    "export", "load_scenario", "parse_scenario", "run", "sample", "write_scenario",
]

__version__ = "0.1.0"
