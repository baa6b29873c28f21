"""Proportional-fair low-delay rate allocation.

The allocation maximises sum(log x_i) subject to

    w'x <= 1 - c/T                      (mean delay at most T)
    c x_i + Nbar w'x <= Nbar, all i     (aggregation at most Nbar)

Its solution has the form N = min(nu * W, Nbar), x = F^-1(N), where W
scales each station's aggregation level in proportion to its PHY rate and
``nu`` is a scalar found by bisection on the delay constraint.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from .model import FEASIBILITY_MARGIN, WlanModelConfig, delay_from_aggregation, inverse_aggregation_map

NU_TOL = 1e-10
KKT_TOL = 1e-6
# relative slack below which a constraint is treated as active
ACTIVE_TOL = 1e-7
FEAS_TOL = 1e-9


class Regime(str, enum.Enum):
    INTERIOR = "interior"
    CAP_BOUND = "cap_bound"
    DELAY_INFEASIBLE = "delay_infeasible"


class KktViolationError(ValueError):
    """A candidate allocation violates the primal constraints."""

    def __init__(self, violated: list[str]):
        self.violated = violated
        super().__init__("infeasible allocation: " + "; ".join(violated))


class ConvergenceError(RuntimeError):
    def __init__(self, message, trajectory):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass(frozen=True)
class QosTargets:
    t_bar: float
    n_bar: float

    def __post_init__(self):
        if not self.t_bar > 0:
            raise ValueError(f"t_bar must be > 0, got {self.t_bar}")
        if not self.n_bar >= 1:
            raise ValueError(f"n_bar must be >= 1, got {self.n_bar}")

    def check_against(self, cfg: WlanModelConfig):
        if not self.n_bar < cfg.n_max:
            raise ValueError(f"n_bar ({self.n_bar}) must be below n_max ({cfg.n_max})")


@dataclass(frozen=True)
class WeightVector:
    """Aggregation weights ``W_i = w_ref / w_i``.

    The reference ("station 1") is the fastest station, i.e. the smallest
    per-packet time, so every weight lies in (0, 1] and the reference
    station carries weight 1. Ties go to the lowest index.
    """

    W: np.ndarray
    order: np.ndarray

    @property
    def ref(self) -> int:
        return int(self.order[0])


def weight_vector(w) -> WeightVector:
    w = np.asarray(w, dtype=float)
    order = np.argsort(w, kind="stable")
    return WeightVector(W=w[order[0]] / w, order=order)


@dataclass
class PfSolution:
    x_star: np.ndarray
    n_star: np.ndarray
    nu_star: float
    regime: Regime
    weights: WeightVector

    def objective(self) -> float:
        return float(np.sum(np.log(self.x_star)))

    def to_dict(self, cfg: WlanModelConfig | None = None) -> dict:
        out = {
            "regime": self.regime.value,
            "nu_star": self.nu_star,
            "x_star_pps": self.x_star.tolist(),
            "n_star": self.n_star.tolist(),
            "weights": self.weights.W.tolist(),
            "reference_station": self.weights.ref,
            "objective": self.objective(),
        }
        if cfg is not None:
            out["delay_s"] = delay_from_aggregation(self.n_star, cfg)
            out["airtime"] = (cfg.w * self.x_star).tolist()
        return out


@dataclass
class KktCertificate:
    theta: float
    lam: np.ndarray
    d_value: float
    active_set_complement: list[int]
    residuals: dict = field(default_factory=dict)
    tol: float = KKT_TOL

    @property
    def accepted(self) -> bool:
        return all(r < self.tol for r in self.residuals.values())

    def to_dict(self) -> dict:
        return {
            "theta": self.theta,
            "lambda": self.lam.tolist(),
            "D": self.d_value,
            "U": self.active_set_complement,
            "residuals": self.residuals,
            "accepted": self.accepted,
        }


def capped_targets(nu: float, weights: WeightVector, n_bar: float) -> np.ndarray:
    return np.minimum(nu * weights.W, n_bar)


def classify(nu: float, cfg: WlanModelConfig, q: QosTargets, tol: float = 1e-6) -> Regime:
    if nu >= q.n_bar - tol:
        return Regime.CAP_BOUND
    weights = weight_vector(cfg.w)
    if nu <= 1 + tol and delay_from_aggregation(capped_targets(nu, weights, q.n_bar), cfg) > q.t_bar * (1 + tol):
        return Regime.DELAY_INFEASIBLE
    return Regime.INTERIOR


def _solution(nu, cfg, q, weights, regime) -> PfSolution:
    n_star = capped_targets(nu, weights, q.n_bar)
    return PfSolution(
        x_star=inverse_aggregation_map(n_star, cfg),
        n_star=n_star,
        nu_star=float(nu),
        regime=regime,
        weights=weights,
    )


def solve_fixed_point(cfg: WlanModelConfig, q: QosTargets, tol: float = NU_TOL) -> PfSolution:
    """Closed-form allocation via bisection on the delay constraint.

    Finds the level ``nu`` in [1, n_bar] at which the round time
    c + w'min(nu W, n_bar) meets ``t_bar``; pins ``nu`` at ``n_bar`` when the
    target is never reached and at 1 when it is exceeded even at minimum
    aggregation.
    """
    q.check_against(cfg)
    weights = weight_vector(cfg.w)

    def excess(nu):
        return delay_from_aggregation(capped_targets(nu, weights, q.n_bar), cfg) - q.t_bar

    if excess(q.n_bar) <= 0:
        return _solution(q.n_bar, cfg, q, weights, Regime.CAP_BOUND)
    if excess(1.0) > 0:
        return _solution(1.0, cfg, q, weights, Regime.DELAY_INFEASIBLE)

    lo, hi = 1.0, float(q.n_bar)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if excess(mid) > 0:
            hi = mid
        else:
            lo = mid
    return _solution(0.5 * (lo + hi), cfg, q, weights, Regime.INTERIOR)


@dataclass
class Trajectory:
    z: np.ndarray
    nu: np.ndarray
    x: np.ndarray


def solve_offline_iteration(
    cfg: WlanModelConfig,
    q: QosTargets,
    k1: float = 0.5,
    k2: float = 0.2,
    z0=None,
    nu0: float = 1.0,
    max_slots: int = 20000,
    tol: float = 1e-9,
) -> tuple[Trajectory, PfSolution]:
    """Model-based gradient iteration on (z, nu).

    z(k+1)  = z + K1 (min(nu W, n_bar) - z)
    nu(k+1) = max(nu - K2 (nu - min(T x_ref, n_bar)), 1)
    x(k)    = F^-1(z(k))

    Stops when both increments fall below ``tol``.
    """
    if not k1 > 0 or not 0 < k2 < 1:
        raise ValueError("need k1 > 0 and 0 < k2 < 1")
    q.check_against(cfg)
    weights = weight_vector(cfg.w)
    ref = weights.ref
    z = np.ones(cfg.n) if z0 is None else np.array(z0, dtype=float).reshape(cfg.n)
    if np.any(z < 1) or np.any(z > cfg.n_max):
        raise ValueError("z0 must lie in [1, n_max]")
    if not 1 <= nu0 <= q.n_bar:
        raise ValueError("nu0 must lie in [1, n_bar]")
    nu = float(nu0)

    zs, nus, xs = [z.copy()], [nu], []
    converged = False
    for _ in range(max_slots):
        x = inverse_aggregation_map(z, cfg)
        xs.append(x)
        z_next = z + k1 * (capped_targets(nu, weights, q.n_bar) - z)
        nu_next = max(nu - k2 * (nu - min(q.t_bar * x[ref], q.n_bar)), 1.0)
        step = max(np.max(np.abs(z_next - z)), abs(nu_next - nu))
        z, nu = z_next, nu_next
        zs.append(z.copy())
        nus.append(nu)
        if step < tol:
            converged = True
            break
    xs.append(inverse_aggregation_map(z, cfg))
    traj = Trajectory(z=np.array(zs), nu=np.array(nus), x=np.array(xs))
    if not converged:
        raise ConvergenceError(f"no convergence within {max_slots} slots", traj)

    sol = PfSolution(
        x_star=xs[-1],
        n_star=z.copy(),
        nu_star=nu,
        regime=classify(nu, cfg, q),
        weights=weights,
    )
    return traj, sol


def constraint_slacks(x, cfg: WlanModelConfig, q: QosTargets) -> tuple[float, np.ndarray]:
    """Scaled slacks (>= 0 when satisfied) of the delay and aggregation constraints."""
    x = np.asarray(x, dtype=float)
    load = float(cfg.w @ x)
    delay_slack = (1.0 - cfg.c / q.t_bar) - load
    agg_slack = (q.n_bar - cfg.c * x - q.n_bar * load) / q.n_bar
    return delay_slack, agg_slack


def verify_kkt(sol: PfSolution, cfg: WlanModelConfig, q: QosTargets, tol: float = KKT_TOL) -> KktCertificate:
    """Recover multipliers for ``sol`` and report KKT residuals.

    Multipliers of inactive constraints are zero; the remaining ones are the
    non-negative least-squares solution of the stationarity equations
    x_i (lambda_i c + D w_i) = 1 with D = n_bar sum(lambda) + theta.
    """
    x = np.asarray(sol.x_star, dtype=float)
    n = cfg.n
    violated = []
    if np.any(x <= 0):
        violated.append("x_i > 0")
    delay_slack, agg_slack = constraint_slacks(x, cfg, q)
    if delay_slack < -FEAS_TOL:
        violated.append(f"delay: w'x exceeds 1 - c/T by {-delay_slack:.3g}")
    for i in np.flatnonzero(agg_slack < -FEAS_TOL):
        violated.append(f"aggregation[{i}]: exceeds n_bar by {-agg_slack[i] * q.n_bar:.3g} packets")
    if violated:
        raise KktViolationError(violated)

    delay_active = delay_slack <= ACTIVE_TOL
    cap_active = np.flatnonzero(agg_slack <= ACTIVE_TOL)

    columns = []
    if delay_active:
        columns.append(x * cfg.w)
    for j in cap_active:
        col = q.n_bar * x * cfg.w
        col[j] += x[j] * cfg.c
        columns.append(col)

    theta = 0.0
    lam = np.zeros(n)
    if columns:
        a = np.column_stack(columns)
        mult, _ = nnls(a, np.ones(n))
        k = 0
        if delay_active:
            theta = float(mult[0])
            k = 1
        lam[cap_active] = mult[k:]
    d_value = q.n_bar * lam.sum() + theta

    stationarity = np.abs(1.0 - x * (lam * cfg.c + d_value * cfg.w))
    residuals = {
        "stationarity": float(stationarity.max()),
        "primal": float(max(0.0, -delay_slack, -agg_slack.min())),
        "complementary": float(max(theta * abs(delay_slack), np.max(lam * np.abs(agg_slack)))),
    }
    return KktCertificate(
        theta=theta,
        lam=lam,
        d_value=float(d_value),
        active_set_complement=[int(i) for i in np.flatnonzero(agg_slack > ACTIVE_TOL)],
        residuals=residuals,
        tol=tol,
    )


def _max_last_airtime(partial, a, q_a, n_bar):
    """Largest feasible airtime for the last station given the others.

    ``partial`` holds airtimes of the first n-1 stations along the last axis.
    """
    s = partial.sum(axis=-1)
    bounds = [q_a - s, n_bar * (1.0 - s) / (a[-1] + n_bar)]
    for i in range(partial.shape[-1]):
        bounds.append(1.0 - s - a[i] * partial[..., i] / n_bar)
    return np.minimum.reduce(bounds)


def _zoom_max(f, lo, hi, resolution, iterations):
    """Maximise a unimodal function on [lo, hi] by repeated grid refinement.

    ``lo``/``hi`` are arrays so that many independent 1-D problems can be
    solved at once; ``f`` maps a (..., resolution) grid to values.
    """
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    frac = np.linspace(0.0, 1.0, resolution)
    for _ in range(iterations):
        grid = lo[..., None] + (hi - lo)[..., None] * frac
        vals = f(grid)
        best = np.argmax(vals, axis=-1)
        pick = np.take_along_axis(grid, best[..., None], axis=-1)[..., 0]
        h = (hi - lo) / (resolution - 1)
        lo, hi = np.maximum(lo, pick - h), np.minimum(hi, pick + h)
    grid = lo[..., None] + (hi - lo)[..., None] * frac
    vals = f(grid)
    best = np.argmax(vals, axis=-1)
    return np.take_along_axis(grid, best[..., None], axis=-1)[..., 0], np.max(vals, axis=-1)


def brute_force_oracle(cfg: WlanModelConfig, q: QosTargets, grid_resolution: int = 21, iterations: int = 40) -> np.ndarray:
    """Independent optimum of the convex allocation problem for n <= 3.

    Works in airtime coordinates y_i = w_i x_i. The objective increases in
    every coordinate, so the last station takes the largest airtime the
    constraints allow; the remaining (at most two) coordinates are found by
    nested grid refinement, which is exact for the concave reduced objective.
    """
    n = cfg.n
    if n > 3:
        raise ValueError(f"brute-force oracle supports n <= 3, got n={n}")
    a = cfg.c / cfg.w
    q_a = 1.0 - cfg.c / q.t_bar
    if q_a <= 0:
        raise ValueError("delay target below the overhead: no positive allocation exists")
    n_bar = float(q.n_bar)

    def total(partial):
        last = _max_last_airtime(partial, a, q_a, n_bar)
        with np.errstate(divide="ignore", invalid="ignore"):
            val = np.log(last) + np.sum(np.log(partial), axis=-1)
        return np.where((last > 0) & np.all(partial > 0, axis=-1), val, -np.inf)

    if n == 1:
        y = _max_last_airtime(np.zeros((0,)), a, q_a, n_bar)
        return np.array([float(y)]) / cfg.w

    upper = min(q_a, 1.0)
    if n == 2:
        y1, _ = _zoom_max(lambda g: total(g[..., None]), 0.0, upper, grid_resolution, iterations)
        partial = np.array([float(y1)])
    else:
        def outer(g1):
            def inner(g2):
                return total(np.stack([np.broadcast_to(g1[..., None], g2.shape), g2], axis=-1))

            _, vals = _zoom_max(inner, np.zeros_like(g1), np.full_like(g1, upper), grid_resolution, iterations)
            return vals

        y1, _ = _zoom_max(outer, 0.0, upper, grid_resolution, iterations)
        y2, _ = _zoom_max(lambda g: total(np.stack([np.full_like(g, y1), g], axis=-1)), 0.0, upper, grid_resolution, iterations)
        partial = np.array([float(y1), float(y2)])
    y_last = float(_max_last_airtime(partial, a, q_a, n_bar))
    return np.append(partial, y_last) / cfg.w


def equal_airtime_solution(cfg: WlanModelConfig, q: QosTargets | None = None) -> np.ndarray:
    """Allocation giving every station the same airtime w_i x_i.

    The common airtime is the largest one the constraints allow; with no
    targets the channel is filled up to the feasibility margin.
    """
    n = cfg.n
    share = (1.0 - FEASIBILITY_MARGIN) / n
    if q is not None:
        if np.isfinite(q.t_bar):
            share = min(share, (1.0 - cfg.c / q.t_bar) / n)
        if np.isfinite(q.n_bar):
            a_max = cfg.c / cfg.w.min()
            share = min(share, q.n_bar / (a_max + n * q.n_bar))
    return np.full(n, share) / cfg.w
