"""Aggregation/delay model of a paced 802.11ac downlink.

All rates are in packets/second, per-packet transmit times ``w`` in
seconds/packet and the per-round overhead ``c`` in seconds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PAYLOAD_BYTES = 1500
MAC_OVERHEAD_BYTES = 48
DEFAULT_PACKET_BITS = (PAYLOAD_BYTES + MAC_OVERHEAD_BYTES) * 8
DEFAULT_N_MAX = 64

# numerical margin on w'x < 1
FEASIBILITY_MARGIN = 1e-9

# 802.11ac VHT, 80 MHz, long guard interval, Mbit/s. MCS 6 is not defined
# for NSS 3 at 80 MHz.
VHT80_RATES_MBPS = {
    1: (29.3, 58.5, 87.7, 117.0, 175.5, 234.0, 263.3, 292.5, 351.0, 390.0),
    2: (58.5, 117.0, 175.5, 234.0, 351.0, 468.0, 526.5, 585.0, 702.0, 780.0),
    3: (87.7, 175.5, 263.3, 351.0, 526.5, 702.0, None, 877.5, 1053.0, 1170.0),
}


class InfeasibleRateError(ValueError):
    """Raised when a rate vector saturates the channel (w'x >= 1)."""


class UndefinedDelayError(ValueError):
    """Raised when the mean delay of a station with zero rate is requested."""


def phy_rate(mcs_index: int, nss: int = 1) -> float:
    """PHY data rate in bits/s for a VHT 80 MHz long-GI (MCS, NSS) pair."""
    try:
        mbps = VHT80_RATES_MBPS[nss][mcs_index] if mcs_index >= 0 else None
    except (KeyError, IndexError, TypeError):
        mbps = None
    if mbps is None:
        raise KeyError(f"no VHT80 rate for MCS {mcs_index}, NSS {nss}")
    return mbps * 1e6


def mcs_to_w(mcs_index: int, nss: int = 1, packet_bits: int = DEFAULT_PACKET_BITS) -> float:
    """Per-packet transmit time (s) at the given MCS/NSS."""
    return packet_bits / phy_rate(mcs_index, nss)


@dataclass(frozen=True)
class WlanModelConfig:
    """Controller-side model parameters.

    ``c`` is the aggregate overhead of one round of transmissions to all
    ``n`` stations, ``w[i]`` the time to send one packet to station ``i``.
    """

    c: float
    w: np.ndarray
    n_max: float = DEFAULT_N_MAX
    packet_bits: int = DEFAULT_PACKET_BITS
    n: int = field(init=False)

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.w, dtype=float)).copy()
        w.setflags(write=False)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "n", int(w.size))
        if w.ndim != 1 or w.size < 1:
            raise ValueError("w must be a non-empty vector")
        if not self.c > 0:
            raise ValueError(f"overhead c must be > 0, got {self.c}")
        if np.any(~(w > 0)):
            raise ValueError("every per-packet time w_i must be > 0")
        if not self.n_max >= 1:
            raise ValueError(f"n_max must be >= 1, got {self.n_max}")

    @classmethod
    def from_phy_rates(cls, c, rates_bps, n_max=DEFAULT_N_MAX, packet_bits=DEFAULT_PACKET_BITS):
        rates = np.asarray(rates_bps, dtype=float)
        return cls(c=c, w=packet_bits / rates, n_max=n_max, packet_bits=packet_bits)

    def with_c(self, c: float) -> "WlanModelConfig":
        return WlanModelConfig(c=c, w=self.w, n_max=self.n_max, packet_bits=self.packet_bits)

    def with_w(self, w) -> "WlanModelConfig":
        return WlanModelConfig(c=self.c, w=w, n_max=self.n_max, packet_bits=self.packet_bits)


def _vec(v, n: int, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(v, dtype=float))
    if arr.shape != (n,):
        raise ValueError(f"{name} has shape {arr.shape}, expected ({n},)")
    return arr


def airtime(x, cfg: WlanModelConfig) -> float:
    """Channel fraction w'x spent on payload."""
    return float(cfg.w @ _vec(x, cfg.n, "x"))


def feasible(x, cfg: WlanModelConfig) -> bool:
    x = _vec(x, cfg.n, "x")
    return bool(np.all(x >= 0) and cfg.w @ x < 1.0 - FEASIBILITY_MARGIN)


def _check_feasible(x: np.ndarray, cfg: WlanModelConfig) -> float:
    if np.any(x < 0):
        raise InfeasibleRateError("rates must be non-negative")
    load = float(cfg.w @ x)
    if not load < 1.0 - FEASIBILITY_MARGIN:
        raise InfeasibleRateError(f"w'x = {load:.6g} saturates the channel")
    return load


def project(n, n_max: float) -> np.ndarray:
    """Elementwise projection onto [1, n_max]."""
    return np.clip(n, 1.0, n_max)


def aggregation_unprojected(x, cfg: WlanModelConfig) -> np.ndarray:
    """F(x) = c x / (1 - w'x)."""
    x = _vec(x, cfg.n, "x")
    load = _check_feasible(x, cfg)
    return cfg.c * x / (1.0 - load)


def aggregation_map(x, cfg: WlanModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Mean packets per frame for send rates ``x``.

    Returns ``(projected, raw)``: the value clipped to ``[1, n_max]`` and the
    unprojected F(x). Raises :class:`InfeasibleRateError` if w'x >= 1.
    """
    raw = aggregation_unprojected(x, cfg)
    return project(raw, cfg.n_max), raw


def inverse_aggregation_map(n_agg, cfg: WlanModelConfig) -> np.ndarray:
    """Send rates that produce mean aggregation ``n_agg``: N / (c + w'N)."""
    n_agg = _vec(n_agg, cfg.n, "N")
    if np.any(n_agg < 0):
        raise ValueError("aggregation levels must be non-negative")
    return n_agg / (cfg.c + cfg.w @ n_agg)


def mean_delay(x, cfg: WlanModelConfig) -> np.ndarray:
    """Per-station mean delay max{min{c/(1-w'x), n_max/x_i}, 1/x_i}."""
    x = _vec(x, cfg.n, "x")
    load = _check_feasible(x, cfg)
    if np.any(x == 0):
        raise UndefinedDelayError("mean delay is undefined for a station with zero rate")
    round_time = cfg.c / (1.0 - load)
    return np.maximum(np.minimum(round_time, cfg.n_max / x), 1.0 / x)


def delay_from_aggregation(n_agg, cfg: WlanModelConfig) -> float:
    """Round time c + w'N, equal to c/(1-w'x) at x = F^-1(N)."""
    n_agg = _vec(n_agg, cfg.n, "N")
    return float(cfg.c + cfg.w @ n_agg)
