"""Conformance and fault-injection harness."""

from .clock import OffsetClock
from .faults import FAULT_KINDS, Fault, FaultInjectingTransport, FaultSchedule
from .runner import HarnessEnv, check_invariants, plan_run, run_one, run_randomized_suite
from .scenarios import SCENARIOS, run_scenario

__all__ = [
    "FAULT_KINDS",
    "Fault",
    "FaultInjectingTransport",
    "FaultSchedule",
    "HarnessEnv",
    "OffsetClock",
    "SCENARIOS",
    "check_invariants",
    "plan_run",
    "run_one",
    "run_randomized_suite",
    "run_scenario",
]
