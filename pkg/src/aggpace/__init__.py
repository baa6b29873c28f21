"""Proportional-fair, low-delay send-rate control for aggregating 802.11ac downlinks."""

from .controller import ControllerGains, ControllerState, FeedbackReport, initial_state
from .model import (
    InfeasibleRateError,
    WlanModelConfig,
    aggregation_map,
    delay_from_aggregation,
    feasible,
    inverse_aggregation_map,
    mcs_to_w,
    mean_delay,
)
from .pf_solver import PfSolution, QosTargets, Regime, solve_fixed_point, verify_kkt
from .plant import DisturbanceEvent, Plant, PlantConfig, SlotMeasurement
from .scenario import Scenario, run, sweep

__all__ = [
    "ControllerGains",
    "ControllerState",
    "DisturbanceEvent",
    "FeedbackReport",
    "InfeasibleRateError",
    "PfSolution",
    "Plant",
    "PlantConfig",
    "QosTargets",
    "Regime",
    "Scenario",
    "SlotMeasurement",
    "WlanModelConfig",
    "aggregation_map",
    "delay_from_aggregation",
    "feasible",
    "initial_state",
    "inverse_aggregation_map",
    "mcs_to_w",
    "mean_delay",
    "run",
    "solve_fixed_point",
    "sweep",
    "verify_kkt",
]
