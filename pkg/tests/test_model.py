import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aggpace.model import (
    DEFAULT_PACKET_BITS,
    InfeasibleRateError,
    UndefinedDelayError,
    WlanModelConfig,
    aggregation_map,
    aggregation_unprojected,
    delay_from_aggregation,
    feasible,
    inverse_aggregation_map,
    mcs_to_w,
    mean_delay,
)

W_MCS2 = 12384 / 87.7e6
W_MCS4 = 12384 / 175.5e6
W_MCS9 = 12384 / 390e6


def single(w, c=2e-4):
    return WlanModelConfig(c=c, w=[w])


def test_default_packet_bits():
    assert DEFAULT_PACKET_BITS == (1500 + 48) * 8 == 12384


@pytest.mark.parametrize(
    "mcs, expected, approx",
    [(2, W_MCS2, 1.4122e-4), (4, W_MCS4, 7.0564e-5), (9, W_MCS9, 3.1754e-5)],
)
def test_mcs_to_w_reference_rates(mcs, expected, approx):
    w = mcs_to_w(mcs, 1, 12384)
    assert w == pytest.approx(expected, rel=1e-12)
    assert w == pytest.approx(approx, rel=1e-4)


@pytest.mark.parametrize("mcs, nss", [(6, 3), (10, 1), (-1, 1), (0, 4)])
def test_mcs_to_w_unknown_combination(mcs, nss):
    with pytest.raises(KeyError):
        mcs_to_w(mcs, nss)


def test_aggregation_map_example():
    projected, raw = aggregation_map([10000.0], single(W_MCS9))
    # exact rational evaluation of c x / (1 - w x)
    assert raw[0] == pytest.approx(2.9305680793507665, rel=1e-12)
    assert projected[0] == raw[0]


def test_aggregation_map_zero_rate():
    projected, raw = aggregation_map([0.0], single(W_MCS9))
    assert raw[0] == 0.0
    assert projected[0] == 1.0


def test_aggregation_map_inverse_identity():
    cfg = single(W_MCS2)
    projected, _ = aggregation_map(inverse_aggregation_map([16.0], cfg), cfg)
    assert projected[0] == pytest.approx(16.0, rel=1e-12)


def test_aggregation_map_rejects_saturated_channel():
    cfg = single(W_MCS9)
    with pytest.raises(InfeasibleRateError):
        aggregation_map([1.05 / W_MCS9], cfg)


def test_inverse_example():
    x = inverse_aggregation_map([48.0], single(W_MCS9))
    # exact: 48 / (2e-4 + 48 * 12384/390e6)
    assert x[0] == pytest.approx(27839.246198872155, rel=1e-12)


def test_inverse_zero():
    assert inverse_aggregation_map([0.0], single(W_MCS9))[0] == 0.0


def test_inverse_rejects_negative():
    with pytest.raises(ValueError):
        inverse_aggregation_map([-1.0], single(W_MCS9))


def test_mean_delay_mcs2_at_16():
    cfg = single(W_MCS2)
    x = inverse_aggregation_map([16.0], cfg)
    assert mean_delay(x, cfg)[0] == pytest.approx(2.459338654503991e-3, rel=1e-10)


def test_mean_delay_mcs9_at_48():
    cfg = single(W_MCS9)
    x = inverse_aggregation_map([48.0], cfg)
    assert mean_delay(x, cfg)[0] == pytest.approx(1.7241846153846154e-3, rel=1e-10)


def test_mean_delay_low_rate_branch():
    cfg = single(W_MCS9)
    x = np.array([100.0])  # c/(1-wx) ~ 0.2 ms << 1/x = 10 ms
    assert mean_delay(x, cfg)[0] == pytest.approx(1 / 100.0)


def test_mean_delay_errors():
    cfg = WlanModelConfig(c=2e-4, w=[W_MCS9, W_MCS9])
    with pytest.raises(UndefinedDelayError):
        mean_delay([0.0, 1000.0], cfg)
    with pytest.raises(InfeasibleRateError):
        mean_delay([1 / W_MCS9, 1.0], cfg)


def test_delay_from_aggregation_examples():
    assert delay_from_aggregation([16.0], single(W_MCS2)) == pytest.approx(2.459338654503991e-3, rel=1e-12)
    cfg = WlanModelConfig(c=3e-4, w=[W_MCS2, W_MCS9, W_MCS4])
    assert delay_from_aggregation([0, 0, 0], cfg) == 3e-4


def test_feasible_examples():
    cfg = single(W_MCS9)
    assert feasible([0.0], cfg)
    assert not feasible([1.05 / W_MCS9], cfg)
    assert not feasible([-1.0], cfg)
    assert feasible(inverse_aggregation_map([64.0], cfg), cfg)


@pytest.mark.parametrize(
    "kwargs",
    [dict(c=0, w=[1e-4]), dict(c=1e-4, w=[0.0]), dict(c=1e-4, w=[]), dict(c=1e-4, w=[1e-4], n_max=0.5)],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        WlanModelConfig(**kwargs)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        aggregation_map([1.0, 2.0], single(W_MCS9))


# ------------------------------------------------------------------ properties

rates = st.sampled_from([29.3e6, 87.7e6, 175.5e6, 390e6, 780e6, 1170e6])


@st.composite
def configs(draw, max_n=25):
    n = draw(st.integers(1, max_n))
    phy = draw(st.lists(rates, min_size=n, max_size=n))
    c = draw(st.floats(1e-5, 5e-3))
    return WlanModelConfig.from_phy_rates(c, phy)


@st.composite
def config_and_levels(draw):
    cfg = draw(configs())
    levels = draw(st.lists(st.floats(0.0, 64.0), min_size=cfg.n, max_size=cfg.n))
    return cfg, np.array(levels)


@given(config_and_levels())
def test_round_trip(case):
    cfg, levels = case
    back = aggregation_unprojected(inverse_aggregation_map(levels, cfg), cfg)
    # rounding in x is amplified by w'x / (1 - w'x) = w'N / c
    kappa = cfg.w @ levels / cfg.c
    rtol = 1e-12 + 8 * (cfg.n + 2) * np.finfo(float).eps * kappa
    np.testing.assert_allclose(back, levels, rtol=rtol, atol=1e-300)


@given(config_and_levels())
def test_inverse_range_is_feasible(case):
    cfg, levels = case
    x = inverse_aggregation_map(levels, cfg)
    load = cfg.w @ x
    assert load < 1
    assert load == pytest.approx(cfg.w @ levels / (cfg.c + cfg.w @ levels), rel=1e-12, abs=1e-300)


@given(config_and_levels())
def test_delay_identity(case):
    cfg, levels = case
    x = inverse_aggregation_map(levels, cfg)
    lhs = delay_from_aggregation(aggregation_unprojected(x, cfg), cfg)
    assert lhs == pytest.approx(cfg.c / (1 - cfg.w @ x), rel=1e-12)
    assert delay_from_aggregation(levels, cfg) == pytest.approx(cfg.c / (1 - cfg.w @ x), rel=1e-12)


@settings(max_examples=200)
@given(config_and_levels(), st.data())
def test_monotone_in_rates(case, data):
    cfg, levels = case
    x = inverse_aggregation_map(levels, cfg)
    headroom = 1 - cfg.w @ x
    frac = data.draw(st.lists(st.floats(0, 1), min_size=cfg.n, max_size=cfg.n))
    # spread at most 90% of the remaining airtime over the stations
    delta = 0.9 * headroom * np.array(frac) / (cfg.n * cfg.w)
    before = aggregation_unprojected(x, cfg)
    after = aggregation_unprojected(x + delta, cfg)
    assert np.all(after >= before * (1 - 1e-12))
