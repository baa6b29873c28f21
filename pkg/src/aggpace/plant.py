"""Slotted model of the actual WLAN seen by the controller.

The plant holds the true overhead and PHY rates, which may differ from the
controller's model and change at run time. Each slot it turns the applied
send rates into per-frame aggregation samples, their empirical mean and a
mean delay. Offered airtime beyond channel capacity accumulates in a fluid
backlog (seconds of airtime) drained at rate one.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .controller import FeedbackReport
from .model import DEFAULT_N_MAX, DEFAULT_PACKET_BITS

DEFAULT_SLOT_S = 0.1


class EventKind(str, enum.Enum):
    OVERHEAD_STEP = "overhead_step"
    MCS_CHANGE = "mcs_change"
    NOISE_BURST = "noise_burst"


@dataclass(frozen=True)
class DisturbanceEvent:
    at_slot: int
    kind: EventKind
    c: float | None = None  # overhead_step: new overhead (s)
    station: int | None = None  # mcs_change
    rate: float | None = None  # mcs_change: new PHY rate (bits/s)
    sigma: float | None = None  # noise_burst
    duration: int | None = None  # noise_burst, slots

    def __post_init__(self):
        object.__setattr__(self, "kind", EventKind(self.kind))
        if self.at_slot < 1:
            raise ValueError(f"event slot must be >= 1, got {self.at_slot}")
        if self.kind is EventKind.OVERHEAD_STEP and not (self.c is not None and self.c > 0):
            raise ValueError("overhead_step needs c > 0")
        if self.kind is EventKind.MCS_CHANGE and (self.station is None or not (self.rate or 0) > 0):
            raise ValueError("mcs_change needs a station index and a rate > 0")
        if self.kind is EventKind.NOISE_BURST and (
            self.sigma is None or self.sigma < 0 or not (self.duration or 0) >= 1
        ):
            raise ValueError("noise_burst needs sigma >= 0 and duration >= 1")


@dataclass(frozen=True)
class PlantConfig:
    c_true: float
    phy_rates: tuple  # bits/s per station
    packet_bits: int = DEFAULT_PACKET_BITS
    noise_sigma: float = 0.0
    slot_duration: float = DEFAULT_SLOT_S
    n_max: float = DEFAULT_N_MAX
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "phy_rates", tuple(float(r) for r in np.atleast_1d(self.phy_rates)))
        if not self.c_true > 0:
            raise ValueError("c_true must be > 0")
        if not all(r > 0 for r in self.phy_rates):
            raise ValueError("PHY rates must be > 0")
        if not self.slot_duration > 0:
            raise ValueError("slot_duration must be > 0")
        if not self.noise_sigma >= 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class SlotMeasurement:
    slot: int
    n_meas: np.ndarray
    frames_per_station: np.ndarray
    delay: float
    mcs_report: np.ndarray
    overloaded: bool
    true_mean: np.ndarray = field(repr=False)

    def report(self) -> FeedbackReport:
        return FeedbackReport(n_meas=self.n_meas, mcs_report=self.mcs_report, slot_index=self.slot)


class Plant:
    def __init__(self, cfg: PlantConfig):
        self.cfg = cfg
        self.c_true = cfg.c_true
        self.rates = np.array(cfg.phy_rates)
        self.backlog = 0.0
        self.slot = 0
        self._burst_sigma = None
        self._burst_until = 0
        self._rng = np.random.default_rng(cfg.rng_seed)

    @property
    def n(self) -> int:
        return self.rates.size

    @property
    def w_true(self) -> np.ndarray:
        return self.cfg.packet_bits / self.rates

    @property
    def sigma(self) -> float:
        # the slot about to be stepped is self.slot + 1
        if self._burst_sigma is not None and self.slot < self._burst_until:
            return self._burst_sigma
        return self.cfg.noise_sigma

    def apply_disturbance(self, event: DisturbanceEvent) -> None:
        if event.kind is EventKind.OVERHEAD_STEP:
            self.c_true = float(event.c)
        elif event.kind is EventKind.MCS_CHANGE:
            if not 0 <= event.station < self.n:
                raise IndexError(f"no station {event.station} (plant has {self.n})")
            self.rates = self.rates.copy()
            self.rates[event.station] = float(event.rate)
        else:
            self._burst_sigma = float(event.sigma)
            self._burst_until = self.slot + int(event.duration)

    def step(self, x) -> SlotMeasurement:
        """Hold send rates ``x`` (packets/s) for one slot and measure."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise ValueError(f"rate vector has shape {x.shape}, plant has {self.n} stations")
        if np.any(x < 0):
            raise ValueError("send rates must be non-negative")
        cfg = self.cfg
        sigma = self.sigma
        self.slot += 1
        w = self.w_true
        load = float(w @ x)

        overloaded = load >= 1.0
        if overloaded:
            mean = np.full(self.n, float(cfg.n_max))
        else:
            mean = np.clip(self.c_true * x / (1.0 - load), 1.0, cfg.n_max)
        self.backlog = max(0.0, self.backlog + (load - 1.0) * cfg.slot_duration)

        active = x > 0
        frames = np.where(active, np.maximum(1, np.rint(x * cfg.slot_duration / mean)), 0).astype(np.int64)
        if sigma == 0:
            n_meas = mean.copy()
        else:
            n_meas = np.empty(self.n)
            for i in range(self.n):
                if frames[i] == 0:
                    n_meas[i] = mean[i]
                    continue
                samples = np.rint(mean[i] + sigma * self._rng.standard_normal(frames[i]))
                n_meas[i] = np.clip(samples, 1.0, cfg.n_max).mean()

        delay = self.c_true + float(w @ mean) + self.backlog
        return SlotMeasurement(
            slot=self.slot,
            n_meas=n_meas,
            frames_per_station=frames,
            delay=delay,
            mcs_report=self.rates.copy(),
            overloaded=overloaded,
            true_mean=mean,
        )
