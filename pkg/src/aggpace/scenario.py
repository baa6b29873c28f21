"""Scenario files, the slotted controller/plant loop, metrics and sweeps."""

from __future__ import annotations

import copy
import csv
import enum
import io
import json
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import controller as ctl
from .model import DEFAULT_N_MAX, DEFAULT_PACKET_BITS, WlanModelConfig, phy_rate
from .pf_solver import QosTargets, Regime, solve_fixed_point
from .plant import DisturbanceEvent, EventKind, Plant, PlantConfig

OUT_DIR_ENV = "AGGPACE_OUT"
STEADY_FRACTION = 0.2


class ScenarioError(ValueError):
    """Invalid scenario document."""


class SweepError(RuntimeError):
    def __init__(self, axis, value, cause):
        super().__init__(f"sweep {axis}={value}: {cause}")
        self.axis = axis
        self.value = value


class ScenarioMode(str, enum.Enum):
    CLOSED_LOOP = "closed_loop"
    INNER_ONLY = "inner_only"
    OPEN_LOOP_SOLVE = "open_loop_solve"


@dataclass(frozen=True)
class Scenario:
    phy_rates: tuple  # bits/s
    targets: QosTargets
    overhead_per_station: float = 200e-6  # true overhead per station, s
    gains: ctl.ControllerGains = ctl.ControllerGains()
    mode: ScenarioMode = ScenarioMode.CLOSED_LOOP
    duration_slots: int = 300
    name: str = "scenario"
    description: str = ""
    nss: int = 1
    packet_bits: int = DEFAULT_PACKET_BITS
    n_max: float = DEFAULT_N_MAX
    noise_sigma: float = 0.0
    slot_duration: float = 0.1
    seed: int = 0
    estimate_c: bool = True
    c_hat0: float | None = None
    z0: float | tuple = 1.0
    nu0: float = 1.0
    n_target: float | tuple | None = None
    disturbances: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "phy_rates", tuple(float(r) for r in self.phy_rates))
        object.__setattr__(self, "disturbances", tuple(sorted(self.disturbances, key=lambda e: e.at_slot)))
        if self.duration_slots < 1:
            raise ScenarioError("duration_slots must be >= 1")
        if self.mode is ScenarioMode.INNER_ONLY and self.n_target is None:
            raise ScenarioError("inner_only mode needs n_target")
        self.targets.check_against(self.model)

    @property
    def n(self) -> int:
        return len(self.phy_rates)

    @property
    def c_true(self) -> float:
        return self.n * self.overhead_per_station

    @property
    def model(self) -> WlanModelConfig:
        """Design model: the nominal overhead and the initial PHY rates."""
        return WlanModelConfig.from_phy_rates(self.c_true, self.phy_rates, self.n_max, self.packet_bits)

    @property
    def plant(self) -> PlantConfig:
        return PlantConfig(
            c_true=self.c_true,
            phy_rates=self.phy_rates,
            packet_bits=self.packet_bits,
            noise_sigma=self.noise_sigma,
            slot_duration=self.slot_duration,
            n_max=self.n_max,
            rng_seed=self.seed,
        )


# ---------------------------------------------------------------- parsing

def _get(doc, key, path, default=..., kind=None):
    if key not in doc:
        if default is ...:
            raise ScenarioError(f"{path}{key}: missing required field")
        return default
    val = doc[key]
    if kind is not None and val is not None:
        ok = isinstance(val, kind) and not (kind in (int, float, (int, float)) and isinstance(val, bool))
        if not ok:
            raise ScenarioError(f"{path}{key}: expected {getattr(kind, '__name__', kind)}, got {val!r}")
    return val


NUM = (int, float)


def _rates_from(stations, path) -> tuple[tuple, int]:
    nss = _get(stations, "nss", path, 1, int)
    if "phy_rates_mbps" in stations:
        rates = _get(stations, "phy_rates_mbps", path, kind=list)
        if not rates or not all(isinstance(r, NUM) and r > 0 for r in rates):
            raise ScenarioError(f"{path}phy_rates_mbps: need a non-empty list of positive numbers")
        return tuple(r * 1e6 for r in rates), nss
    mcs = _get(stations, "mcs", path)
    try:
        if isinstance(mcs, list):
            return tuple(phy_rate(m, nss) for m in mcs), nss
        n = _get(stations, "n", path, 1, int)
        if n < 1:
            raise ScenarioError(f"{path}n: must be >= 1")
        return (phy_rate(mcs, nss),) * n, nss
    except KeyError as err:
        raise ScenarioError(f"{path}mcs: {err.args[0]}") from None


def _event_from(doc, path) -> DisturbanceEvent:
    kind = _get(doc, "kind", path, kind=str)
    try:
        kind = EventKind(kind)
    except ValueError:
        raise ScenarioError(f"{path}kind: unknown disturbance kind {kind!r}") from None
    at = _get(doc, "at_slot", path, kind=int)
    kw = {}
    if kind is EventKind.OVERHEAD_STEP:
        kw["c"] = _get(doc, "c_us", path, kind=NUM) * 1e-6
    elif kind is EventKind.MCS_CHANGE:
        kw["station"] = _get(doc, "station", path, kind=int)
        if "rate_mbps" in doc:
            kw["rate"] = _get(doc, "rate_mbps", path, kind=NUM) * 1e6
        else:
            try:
                kw["rate"] = phy_rate(_get(doc, "mcs", path, kind=int), _get(doc, "nss", path, 1, int))
            except KeyError as err:
                raise ScenarioError(f"{path}mcs: {err.args[0]}") from None
    else:
        kw["sigma"] = _get(doc, "sigma", path, kind=NUM)
        kw["duration"] = _get(doc, "duration", path, kind=int)
    try:
        return DisturbanceEvent(at_slot=at, kind=kind, **kw)
    except ValueError as err:
        raise ScenarioError(f"{path}: {err}") from None


def scenario_from_dict(doc: dict) -> Scenario:
    if not isinstance(doc, dict):
        raise ScenarioError("scenario must be a JSON object")
    rates, nss = _rates_from(_get(doc, "stations", "", kind=dict), "stations.")
    tg = _get(doc, "targets", "", kind=dict)
    gains_doc = _get(doc, "gains", "", {}, dict)
    plant_doc = _get(doc, "plant", "", {}, dict)
    init = _get(doc, "initial", "", {}, dict)
    mode = _get(doc, "mode", "", "closed_loop", str)
    try:
        mode = ScenarioMode(mode)
    except ValueError:
        raise ScenarioError(f"mode: unknown mode {mode!r}") from None
    c_hat_us = _get(init, "c_hat_us", "initial.", None, NUM)
    n_target = _get(doc, "n_target", "", None, (int, float, list))
    z0 = _get(init, "z", "initial.", 1.0, (int, float, list))
    events = _get(doc, "disturbances", "", [], list)

    try:
        return Scenario(
            name=_get(doc, "name", "", "scenario", str),
            description=_get(doc, "description", "", "", str),
            mode=mode,
            phy_rates=rates,
            nss=nss,
            packet_bits=_get(doc, "packet_bits", "", DEFAULT_PACKET_BITS, int),
            overhead_per_station=_get(doc, "overhead_per_station_us", "", 200, NUM) * 1e-6,
            targets=QosTargets(
                t_bar=_get(tg, "t_bar_ms", "targets.", kind=NUM) * 1e-3,
                n_bar=_get(tg, "n_bar", "targets.", kind=NUM),
            ),
            gains=ctl.ControllerGains(
                k1=_get(gains_doc, "k1", "gains.", 0.5, NUM),
                k2=_get(gains_doc, "k2", "gains.", 0.2, NUM),
                beta=_get(gains_doc, "beta", "gains.", 0.05, NUM),
            ),
            estimate_c=_get(doc, "estimate_c", "", True, bool),
            c_hat0=None if c_hat_us is None else c_hat_us * 1e-6,
            z0=tuple(z0) if isinstance(z0, list) else z0,
            nu0=_get(init, "nu", "initial.", 1.0, NUM),
            n_target=tuple(n_target) if isinstance(n_target, list) else n_target,
            noise_sigma=_get(plant_doc, "noise_sigma", "plant.", 0.0, NUM),
            slot_duration=_get(plant_doc, "slot_ms", "plant.", 100, NUM) * 1e-3,
            n_max=_get(plant_doc, "n_max", "plant.", DEFAULT_N_MAX, NUM),
            seed=_get(plant_doc, "seed", "plant.", 0, int),
            disturbances=tuple(_event_from(e, f"disturbances[{i}].") for i, e in enumerate(events)),
            duration_slots=_get(doc, "duration_slots", "", 300, int),
        )
    except ScenarioError:
        raise
    except ValueError as err:
        raise ScenarioError(str(err)) from None


def load_scenario(path) -> Scenario:
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise ScenarioError(f"{path}: line {err.lineno}, column {err.colno}: {err.msg}") from None
    try:
        return scenario_from_dict(doc)
    except ScenarioError as err:
        raise ScenarioError(f"{path}: {err}") from None


def scenario_to_dict(sc: Scenario) -> dict:
    doc = {
        "name": sc.name,
        "description": sc.description,
        "mode": sc.mode.value,
        "stations": {"phy_rates_mbps": [r / 1e6 for r in sc.phy_rates], "nss": sc.nss},
        "packet_bits": sc.packet_bits,
        "overhead_per_station_us": sc.overhead_per_station * 1e6,
        "targets": {"t_bar_ms": sc.targets.t_bar * 1e3, "n_bar": sc.targets.n_bar},
        "gains": {"k1": sc.gains.k1, "k2": sc.gains.k2, "beta": sc.gains.beta},
        "estimate_c": sc.estimate_c,
        "initial": {"z": list(sc.z0) if isinstance(sc.z0, tuple) else sc.z0, "nu": sc.nu0},
        "plant": {
            "noise_sigma": sc.noise_sigma,
            "slot_ms": sc.slot_duration * 1e3,
            "n_max": sc.n_max,
            "seed": sc.seed,
        },
        "duration_slots": sc.duration_slots,
    }
    if sc.c_hat0 is not None:
        doc["initial"]["c_hat_us"] = sc.c_hat0 * 1e6
    if sc.n_target is not None:
        doc["n_target"] = list(sc.n_target) if isinstance(sc.n_target, tuple) else sc.n_target
    events = []
    for e in sc.disturbances:
        ev = {"at_slot": e.at_slot, "kind": e.kind.value}
        if e.kind is EventKind.OVERHEAD_STEP:
            ev["c_us"] = e.c * 1e6
        elif e.kind is EventKind.MCS_CHANGE:
            ev.update(station=e.station, rate_mbps=e.rate / 1e6)
        else:
            ev.update(sigma=e.sigma, duration=e.duration)
        events.append(ev)
    if events:
        doc["disturbances"] = events
    return doc


# ---------------------------------------------------------------- running

@dataclass
class RunMetrics:
    rise_time_slots: float
    overshoot_fraction: float
    steady_state_error: float
    delay_rms_error: float
    converged: bool
    mean_delay: float = 0.0
    mean_rate: float = 0.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RunResult:
    scenario: Scenario
    x: np.ndarray  # (slots, n) applied rates
    n_meas: np.ndarray
    n_target: np.ndarray
    nu: np.ndarray
    c_hat: np.ndarray
    delay: np.ndarray
    overloaded: np.ndarray
    metrics: RunMetrics = None
    snapshots: list = field(default_factory=list, repr=False)

    @property
    def slots(self) -> np.ndarray:
        return np.arange(1, len(self.delay) + 1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        n = self.x.shape[1]
        header = ["slot", "time_s"]
        for i in range(n):
            header += [f"x_pps_{i}", f"n_meas_{i}", f"n_target_{i}"]
        header += ["nu", "c_hat_us", "delay_ms", "overloaded"]
        wr.writerow(header)
        dt = self.scenario.slot_duration
        for k in range(len(self.delay)):
            row = [k + 1, repr((k + 1) * dt)]
            for i in range(n):
                row += [repr(float(self.x[k, i])), repr(float(self.n_meas[k, i])), repr(float(self.n_target[k, i]))]
            row += [
                repr(float(self.nu[k])),
                repr(float(self.c_hat[k] * 1e6)),
                repr(float(self.delay[k] * 1e3)),
                int(self.overloaded[k]),
            ]
            wr.writerow(row)
        return buf.getvalue()


def _step_metrics(signal: np.ndarray) -> tuple[float, float]:
    start = signal[0]
    tail = max(1, int(round(STEADY_FRACTION * len(signal))))
    final = float(np.mean(signal[-tail:]))
    span = final - start
    # no step to speak of (e.g. a run that starts at equilibrium)
    if abs(span) < 0.01 * max(abs(final), 1.0):
        return 0.0, 0.0
    progress = (signal - start) / span
    t10 = np.argmax(progress >= 0.1)
    t90 = np.argmax(progress >= 0.9)
    rise = float(t90 - t10) if progress[t90] >= 0.9 else float("inf")
    overshoot = max(0.0, float(np.max(progress)) - 1.0)
    return rise, overshoot


def compute_metrics(res: RunResult) -> RunMetrics:
    sc = res.scenario
    slots = len(res.delay)
    tail = max(1, int(round(STEADY_FRACTION * slots)))
    rise, overshoot = _step_metrics(res.n_meas.mean(axis=1))
    err = float(np.mean(np.abs(res.n_target[-tail:] - res.n_meas[-tail:])))
    delay_rms = float(np.sqrt(np.mean((res.delay[-tail:] - sc.targets.t_bar) ** 2)))
    tol = 0.05 * float(np.mean(res.n_target[-tail:])) + sc.noise_sigma
    return RunMetrics(
        rise_time_slots=rise,
        overshoot_fraction=overshoot,
        steady_state_error=err,
        delay_rms_error=delay_rms,
        converged=bool(err <= tol),
        mean_delay=float(np.mean(res.delay[-tail:])),
        mean_rate=float(np.mean(res.x[-tail:])),
    )


def run(sc: Scenario, seed: int | None = None, keep_snapshots: bool = False) -> RunResult:
    """Execute the slotted loop: plant step, controller update, new rates."""
    if seed is not None:
        sc = replace(sc, seed=seed)
    plant = Plant(sc.plant)
    fixed = ctl.LoopMode.INNER_ONLY if sc.mode is ScenarioMode.INNER_ONLY else ctl.LoopMode.CLOSED_LOOP
    state = ctl.initial_state(
        sc.phy_rates,
        sc.targets,
        sc.gains,
        packet_bits=sc.packet_bits,
        n_max=sc.n_max,
        c_hat0=sc.c_hat0,
        z0=sc.z0,
        nu0=sc.nu0,
        mode=fixed,
        estimate_c=sc.estimate_c,
        fixed_target=sc.n_target,
    )
    if sc.mode is ScenarioMode.OPEN_LOOP_SOLVE:
        open_loop = solve_fixed_point(state.model, sc.targets)
        x = open_loop.x_star
        target_row = open_loop.n_star
    else:
        x = ctl.compute_rates(state)

    events = list(sc.disturbances)
    T = sc.duration_slots
    rec = {k: np.empty((T, sc.n)) for k in ("x", "n_meas", "n_target")}
    nu, c_hat, delay, over = (np.empty(T) for _ in range(4))
    snaps = []
    for k in range(T):
        slot = k + 1
        while events and events[0].at_slot == slot:
            plant.apply_disturbance(events.pop(0))
        meas = plant.step(x)
        rec["x"][k] = x
        rec["n_meas"][k] = meas.n_meas
        rec["n_target"][k] = target_row if sc.mode is ScenarioMode.OPEN_LOOP_SOLVE else state.n_target()
        nu[k], c_hat[k] = state.nu, state.c_hat
        delay[k], over[k] = meas.delay, meas.overloaded
        if sc.mode is not ScenarioMode.OPEN_LOOP_SOLVE:
            x = ctl.step(state, meas.report(), x)
        if keep_snapshots:
            snaps.append(state.snapshot(x))

    res = RunResult(
        scenario=sc,
        x=rec["x"],
        n_meas=rec["n_meas"],
        n_target=rec["n_target"],
        nu=nu,
        c_hat=c_hat,
        delay=delay,
        overloaded=over.astype(bool),
        snapshots=snaps,
    )
    res.metrics = compute_metrics(res)
    return res


# ---------------------------------------------------------------- sweeps

SWEEP_AXES = ("t_bar", "n", "mcs", "k1", "k2")


@dataclass
class SweepRow:
    value: float
    mean_delay: float
    mean_rate: float
    p75_delay: float
    p75_rate: float
    regime: str
    predicted_delay: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def vary(sc: Scenario, axis: str, value) -> Scenario:
    if axis == "t_bar":
        return replace(sc, targets=QosTargets(t_bar=float(value), n_bar=sc.targets.n_bar))
    if axis == "n":
        n = int(value)
        if n < 1 or n != value:
            raise ValueError(f"station count must be a positive integer, got {value}")
        return replace(sc, phy_rates=(sc.phy_rates[0],) * n, n_target=_scalar(sc.n_target), z0=_scalar(sc.z0))
    if axis == "mcs":
        return replace(sc, phy_rates=(phy_rate(int(value), sc.nss),) * sc.n)
    if axis == "k1":
        return replace(sc, gains=replace(sc.gains, k1=float(value)))
    if axis == "k2":
        return replace(sc, gains=replace(sc.gains, k2=float(value)))
    raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")


def _scalar(v):
    # per-station vectors cannot follow a change of n; keep the first entry
    return v[0] if isinstance(v, tuple) else v


def nearest_rank(values, pct: float) -> float:
    return float(np.percentile(np.asarray(values).ravel(), pct, method="inverted_cdf"))


def _sweep_one(args) -> SweepRow:
    sc, axis, value = args
    try:
        vsc = vary(sc, axis, value)
        res = run(vsc)
        sol = solve_fixed_point(vsc.model, vsc.targets)
    except Exception as err:  # noqa: BLE001 - re-raised with context
        raise SweepError(axis, value, err) from err
    half = len(res.delay) // 2
    d, x = res.delay[half:], res.x[half:]
    return SweepRow(
        value=float(value),
        mean_delay=float(np.mean(d)),
        mean_rate=float(np.mean(x)),
        p75_delay=nearest_rank(d, 75),
        p75_rate=nearest_rank(x, 75),
        regime=sol.regime.value,
        predicted_delay=float(vsc.model.c + vsc.model.w @ sol.n_star),
    )


def sweep(base: Scenario, axis: str, values, jobs: int = 1) -> list[SweepRow]:
    """One run per axis value; statistics over the final half of each run."""
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    tasks = [(base, axis, v) for v in values]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_sweep_one, tasks))
    return [_sweep_one(t) for t in tasks]


def sweep_to_csv(rows: list[SweepRow], axis: str) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow([axis + "_s" if axis == "t_bar" else axis, "mean_delay_ms", "mean_rate_pps", "p75_delay_ms", "p75_rate_pps", "regime", "predicted_delay_ms"])
    for r in rows:
        wr.writerow([
            repr(r.value),
            repr(r.mean_delay * 1e3),
            repr(r.mean_rate),
            repr(r.p75_delay * 1e3),
            repr(r.p75_rate),
            r.regime,
            repr(r.predicted_delay * 1e3),
        ])
    return buf.getvalue()


# ---------------------------------------------------------------- output

def output_dir(cli_value=None) -> Path:
    return Path(cli_value or os.environ.get(OUT_DIR_ENV) or "runs")


def write_atomic(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------- presets

def _preset(**doc):
    return doc


PRESETS = {
    "step_k1": _preset(
        description="Aggregation step response to N_target=32, one station, MCS 9 (sweep k1 over 0.1/0.3/0.5/0.8)",
        mode="inner_only",
        stations={"n": 1, "mcs": 9, "nss": 1},
        n_target=32,
        targets={"t_bar_ms": 2.5, "n_bar": 48},
        initial={"c_hat_us": 200},
        plant={"noise_sigma": 1.0, "seed": 1},
        duration_slots=100,
        sweep={"axis": "k1", "values": [0.1, 0.3, 0.5, 0.8]},
    ),
    "step_k1_n10": _preset(
        description="Aggregation step response to N_target=32, ten stations, MCS 9 (sweep k1)",
        mode="inner_only",
        stations={"n": 10, "mcs": 9, "nss": 1},
        n_target=32,
        targets={"t_bar_ms": 25, "n_bar": 48},
        initial={"c_hat_us": 2000},
        plant={"noise_sigma": 1.0, "seed": 1},
        duration_slots=100,
        sweep={"axis": "k1", "values": [0.1, 0.3, 0.5, 0.8]},
    ),
    "delay_reg": _preset(
        description="Delay regulation to T=2.5 ms, one station, MCS 2 (sweep mcs over 2/4/9)",
        stations={"n": 1, "mcs": 2, "nss": 1},
        targets={"t_bar_ms": 2.5, "n_bar": 48},
        plant={"noise_sigma": 1.0, "seed": 1},
        duration_slots=300,
        sweep={"axis": "mcs", "values": [2, 4, 9]},
    ),
    "c_track": _preset(
        description="Overhead estimator tracking a 200 us -> 2200 us step at slot 150, N_target=32, MCS 9",
        mode="inner_only",
        stations={"n": 1, "mcs": 9, "nss": 1},
        n_target=32,
        targets={"t_bar_ms": 2.5, "n_bar": 48},
        initial={"c_hat_us": 200, "z": 32},
        plant={"noise_sigma": 0.0, "seed": 1},
        disturbances=[{"at_slot": 150, "kind": "overhead_step", "c_us": 2200}],
        duration_slots=300,
    ),
    "regulation": _preset(
        description="Closed-loop delay regulation, ten stations, MCS 9, T=10 ms (sweep t_bar 5-20 ms)",
        stations={"n": 10, "mcs": 9, "nss": 1},
        targets={"t_bar_ms": 10, "n_bar": 48},
        plant={"noise_sigma": 1.0, "seed": 1},
        duration_slots=400,
        sweep={"axis": "t_bar", "values": [5, 7.5, 10, 15, 20]},
    ),
}


def preset_doc(name: str) -> dict:
    try:
        doc = copy.deepcopy(PRESETS[name])
    except KeyError:
        raise ScenarioError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}") from None
    doc.setdefault("name", name)
    return doc


def preset(name: str) -> Scenario:
    doc = preset_doc(name)
    doc.pop("sweep", None)
    return scenario_from_dict(doc)
