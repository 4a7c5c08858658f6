"""Scenario runner, brute-force oracle, benchmark and CLI."""

from .oracle import OracleResult, oracle_check
from .scenario import Scenario, load_scenario, parse_scenario
from .simulation import RunReport, Simulation, run

__all__ = [
    "OracleResult",
    "RunReport",
    "Scenario",
    "Simulation",
    "load_scenario",
    "oracle_check",
    "parse_scenario",
    "run",
]
