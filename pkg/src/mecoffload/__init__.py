"""Delay-aware computation offloading for cascade-queue edge computing."""

from .expint import e1
from .params import SystemParams, sufficient_preset, constrained_preset
from .rates import local_rate, tx_rate, expected_tx_power, expected_tx_rate
from .policy import (
    Decision,
    SteadyState,
    RateEstimate,
    PriorityCoeffs,
    WaterFillingPolicy,
    solve_steady_state,
    estimate_rates,
    priority_coeffs,
    gradients,
    decide,
)
from .env import ArrivalProcess, RemoteServiceProcess, Environment, EnvSpec, load_trace
from .simulator import QueueState, SlotRecord, RunMetrics, step, run, monte_carlo, stability_probe
from .baselines import BaselineConfig, make_baseline

__all__ = [
    "e1",
    "SystemParams",
    "sufficient_preset",
    "constrained_preset",
    "local_rate",
    "tx_rate",
    "expected_tx_power",
    "expected_tx_rate",
    "Decision",
    "SteadyState",
    "RateEstimate",
    "PriorityCoeffs",
    "WaterFillingPolicy",
    "solve_steady_state",
    "estimate_rates",
    "priority_coeffs",
    "gradients",
    "decide",
    "ArrivalProcess",
    "RemoteServiceProcess",
    "Environment",
    "EnvSpec",
    "load_trace",
    "QueueState",
    "SlotRecord",
    "RunMetrics",
    "step",
    "run",
    "monte_carlo",
    "stability_probe",
    "BaselineConfig",
    "make_baseline",
]

__version__ = "0.1.0"
