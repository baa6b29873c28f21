"""Online inner/outer aggregation controller.

Each slot the controller receives the measured mean aggregation level per
station and the stations' PHY rates, and produces the send rates for the
next slot:

* the overhead estimate ``c_hat`` is refreshed from the measurement,
* the inner integral loop moves ``z`` towards ``N_target = min(nu W, n_bar)``,
* the outer integral loop moves ``nu`` towards ``min(T x_ref, n_bar)``,
* send rates are ``x = z / (c_hat + w'z)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .model import DEFAULT_N_MAX, DEFAULT_PACKET_BITS, WlanModelConfig, inverse_aggregation_map
from .pf_solver import QosTargets, WeightVector, capped_targets, weight_vector

CONTENTION_WINDOW = 16
PHY_SLOT_S = 9e-6


class LoopMode(str, enum.Enum):
    CLOSED_LOOP = "closed_loop"
    INNER_ONLY = "inner_only"


@dataclass(frozen=True)
class ControllerGains:
    k1: float = 0.5
    k2: float = 0.2
    beta: float = 0.05

    def __post_init__(self):
        if not self.k1 > 0:
            raise ValueError(f"k1 must be > 0, got {self.k1}")
        if not self.k2 > 0:
            raise ValueError(f"k2 must be > 0, got {self.k2}")
        if not 0 < self.beta <= 1:
            raise ValueError(f"beta must be in (0, 1], got {self.beta}")


@dataclass(frozen=True)
class FeedbackReport:
    n_meas: np.ndarray
    mcs_report: np.ndarray  # bits/s
    slot_index: int


def default_c_hat(n: int) -> float:
    """Cold-start overhead: n * (CW/2) * PHY slot."""
    return n * (CONTENTION_WINDOW / 2) * PHY_SLOT_S


@dataclass
class ControllerState:
    model: WlanModelConfig  # c holds the current estimate c_hat
    targets: QosTargets
    gains: ControllerGains
    z: np.ndarray
    nu: float
    slot: int = 0
    mode: LoopMode = LoopMode.CLOSED_LOOP
    estimate_c: bool = True
    fixed_target: np.ndarray | None = None
    weights: WeightVector = field(init=False)

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float).reshape(self.model.n)
        self.weights = weight_vector(self.model.w)
        if self.fixed_target is not None:
            self.fixed_target = np.broadcast_to(
                np.asarray(self.fixed_target, dtype=float), (self.model.n,)
            ).copy()

    @property
    def c_hat(self) -> float:
        return self.model.c

    @property
    def n(self) -> int:
        return self.model.n

    def n_target(self) -> np.ndarray:
        if self.mode is LoopMode.INNER_ONLY and self.fixed_target is not None:
            return self.fixed_target
        return capped_targets(self.nu, self.weights, self.targets.n_bar)

    def snapshot(self, x=None) -> dict:
        return {
            "slot": self.slot,
            "z": self.z.tolist(),
            "nu": self.nu,
            "c_hat": self.c_hat,
            "x": None if x is None else np.asarray(x).tolist(),
            "N_target": self.n_target().tolist(),
        }


def initial_state(
    phy_rates,
    targets: QosTargets,
    gains: ControllerGains = ControllerGains(),
    *,
    packet_bits: int = DEFAULT_PACKET_BITS,
    n_max: float = DEFAULT_N_MAX,
    c_hat0: float | None = None,
    z0=None,
    nu0: float = 1.0,
    mode: LoopMode = LoopMode.CLOSED_LOOP,
    estimate_c: bool = True,
    fixed_target=None,
) -> ControllerState:
    rates = np.atleast_1d(np.asarray(phy_rates, dtype=float))
    n = rates.size
    model = WlanModelConfig.from_phy_rates(
        c_hat0 if c_hat0 is not None else default_c_hat(n), rates, n_max=n_max, packet_bits=packet_bits
    )
    targets.check_against(model)
    z = np.ones(n) if z0 is None else np.broadcast_to(np.asarray(z0, dtype=float), (n,)).copy()
    if mode is LoopMode.INNER_ONLY and fixed_target is None:
        raise ValueError("inner_only mode needs a fixed aggregation target")
    return ControllerState(
        model=model,
        targets=targets,
        gains=gains,
        z=np.clip(z, 1.0, n_max),
        nu=float(np.clip(nu0, 1.0, targets.n_bar)),
        mode=mode,
        estimate_c=estimate_c,
        fixed_target=fixed_target,
    )


def _check_dims(state: ControllerState, report: FeedbackReport):
    if np.shape(report.n_meas) != (state.n,) or np.shape(report.mcs_report) != (state.n,):
        raise ValueError(
            f"report carries {np.shape(report.n_meas)} / {np.shape(report.mcs_report)} entries, "
            f"controller has {state.n} stations"
        )


def inner_update(state: ControllerState, report: FeedbackReport) -> np.ndarray:
    """z(k+1) = clip(z + K1 (N_target - N_meas), 1, n_max)."""
    _check_dims(state, report)
    e = state.n_target() - np.asarray(report.n_meas, dtype=float)
    return np.clip(state.z + state.gains.k1 * e, 1.0, state.model.n_max)


def outer_update(state: ControllerState) -> float:
    """nu(k+1) = clip(nu + K2 (min(T x_ref, n_bar) - nu), 1, n_bar)."""
    x = inverse_aggregation_map(state.z, state.model)
    setpoint = min(state.targets.t_bar * x[state.weights.ref], state.targets.n_bar)
    nu = state.nu + state.gains.k2 * (setpoint - state.nu)
    return float(min(max(nu, 1.0), state.targets.n_bar))


def compute_rates(state: ControllerState) -> np.ndarray:
    return inverse_aggregation_map(state.z, state.model)


def estimate_c(state: ControllerState, report: FeedbackReport, x_applied) -> float:
    """Exponentially smoothed overhead estimate.

    The raw estimate inverts the model at the reference station,
    (N_meas / x) (1 - w'x), with w taken from the report.
    """
    _check_dims(state, report)
    x = np.asarray(x_applied, dtype=float)
    w = state.model.packet_bits / np.asarray(report.mcs_report, dtype=float)
    ref = weight_vector(w).ref
    if x[ref] <= 0:
        return state.c_hat
    with np.errstate(over="ignore", divide="ignore"):
        raw = report.n_meas[ref] / x[ref] * (1.0 - float(w @ x))
    if not (np.isfinite(raw) and raw > 0):
        return state.c_hat
    beta = state.gains.beta
    return (1.0 - beta) * state.c_hat + beta * raw


def step(state: ControllerState, report: FeedbackReport, x_applied) -> np.ndarray:
    """Advance the controller by one slot and return the next send rates.

    Order: overhead estimate, re-sort on reported PHY rates, inner and outer
    updates (both from the slot-k values), rate computation.
    """
    _check_dims(state, report)
    c_hat = estimate_c(state, report, x_applied) if state.estimate_c else state.c_hat
    w = state.model.packet_bits / np.asarray(report.mcs_report, dtype=float)
    state.model = WlanModelConfig(c=c_hat, w=w, n_max=state.model.n_max, packet_bits=state.model.packet_bits)
    state.weights = weight_vector(w)

    z_next = inner_update(state, report)
    nu_next = outer_update(state) if state.mode is LoopMode.CLOSED_LOOP else state.nu
    state.z, state.nu = z_next, nu_next
    state.slot = max(state.slot, report.slot_index)
    return compute_rates(state)


def loop_diagnostics(state: ControllerState, c_true: float) -> dict:
    """Effective loop gains against the true overhead (test harness use).

    gamma_i = clip(c_true z_i / c_hat, 1, n_max) / z_i is the inner-loop plant
    gain; gamma0 <= 1 is the attenuation of the outer loop by the n_bar cap.
    """
    c_hat = state.c_hat
    gamma = np.clip(c_true * state.z / c_hat, 1.0, state.model.n_max) / state.z
    w_ref = state.model.w[state.weights.ref]
    level = state.targets.t_bar * state.nu / (c_hat + state.nu * state.n * w_ref)
    gamma0 = 1.0 if level <= state.targets.n_bar else state.targets.n_bar / level
    return {"gamma": gamma, "gamma0": float(gamma0)}


def run_separated(
    model: WlanModelConfig,
    targets: QosTargets,
    k2: float,
    nu0: float = 1.0,
    slots: int = 2000,
) -> np.ndarray:
    """Outer loop alone with the inner loop assumed settled (z = nu W).

    Returns the nu trajectory, starting with ``nu0``.
    """
    weights = weight_vector(model.w)
    nus = [float(nu0)]
    nu = float(nu0)
    for _ in range(slots):
        x = inverse_aggregation_map(capped_targets(nu, weights, targets.n_bar), model)
        nu = nu + k2 * (min(targets.t_bar * x[weights.ref], targets.n_bar) - nu)
        nu = min(max(nu, 1.0), targets.n_bar)
        nus.append(nu)
    return np.array(nus)
