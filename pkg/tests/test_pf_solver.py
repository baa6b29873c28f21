import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aggpace.model import WlanModelConfig, aggregation_unprojected, delay_from_aggregation
from aggpace.pf_solver import (
    ConvergenceError,
    KktViolationError,
    PfSolution,
    QosTargets,
    Regime,
    brute_force_oracle,
    equal_airtime_solution,
    solve_fixed_point,
    solve_offline_iteration,
    verify_kkt,
    weight_vector,
)

W2 = 12384 / 87.7e6
W4 = 12384 / 175.5e6
W9 = 12384 / 390e6
C1 = 2e-4


def cfg_of(*w, c=None):
    return WlanModelConfig(c=C1 * len(w) if c is None else c, w=list(w))


MCS2 = (cfg_of(W2), QosTargets(2.5e-3, 48))
MCS9 = (cfg_of(W9), QosTargets(2.5e-3, 48))


def objective(x):
    return float(np.sum(np.log(x)))


def test_weights_reference_is_fastest():
    wv = weight_vector([W2, W9, W4])
    assert wv.ref == 1
    np.testing.assert_allclose(wv.W, [W9 / W2, 1.0, W9 / W4])
    assert np.all(wv.W <= 1)


def test_weights_tie_goes_to_lowest_index():
    assert weight_vector([W4, W9, W9]).ref == 1
    assert weight_vector([W9, W9]).ref == 0


def test_targets_validation():
    with pytest.raises(ValueError):
        QosTargets(0.0, 48)
    with pytest.raises(ValueError):
        QosTargets(1e-3, 0.5)
    with pytest.raises(ValueError):
        solve_fixed_point(cfg_of(W9), QosTargets(1e-3, 64))


def test_fixed_point_mcs2_interior():
    sol = solve_fixed_point(*MCS2)
    assert sol.regime is Regime.INTERIOR
    # (T - c) / w by exact rational arithmetic
    assert sol.nu_star == pytest.approx(16.287952196382427, abs=1e-9)
    assert delay_from_aggregation(sol.n_star, MCS2[0]) == pytest.approx(2.5e-3, rel=1e-9)


def test_fixed_point_mcs9_cap_bound():
    sol = solve_fixed_point(*MCS9)
    assert sol.regime is Regime.CAP_BOUND
    assert sol.nu_star == 48
    np.testing.assert_allclose(sol.n_star, [48])


def test_fixed_point_delay_infeasible():
    cfg = cfg_of(W2, W2)
    q = QosTargets(cfg.c + 2 * W2 * 0.9, 48)
    sol = solve_fixed_point(cfg, q)
    assert sol.regime is Regime.DELAY_INFEASIBLE
    assert sol.nu_star == 1


def test_solution_invariants():
    cfg, q = cfg_of(W2, W9, W4), QosTargets(5e-3, 48)
    sol = solve_fixed_point(cfg, q)
    np.testing.assert_allclose(sol.n_star, np.minimum(sol.nu_star * sol.weights.W, q.n_bar))
    np.testing.assert_allclose(aggregation_unprojected(sol.x_star, cfg), sol.n_star, rtol=1e-12)


# ---------------------------------------------------------------- offline iteration

@pytest.mark.parametrize(
    "cfg, q",
    [MCS2, MCS9, (cfg_of(W2, W9), QosTargets(3e-3, 48)), (cfg_of(W2, W4, W9), QosTargets(5e-3, 40)),
     (cfg_of(W9, W9, W9), QosTargets(20e-3, 48))],
)
def test_offline_iteration_matches_fixed_point(cfg, q):
    _, it = solve_offline_iteration(cfg, q, k1=0.5, k2=0.2)
    ref = solve_fixed_point(cfg, q)
    np.testing.assert_allclose(it.x_star, ref.x_star, rtol=1e-6)
    np.testing.assert_allclose(it.n_star, ref.n_star, rtol=1e-6)
    assert it.regime is ref.regime


def test_offline_iteration_at_equilibrium_stays_put():
    cfg, q = MCS2
    ref = solve_fixed_point(cfg, q)
    traj, _ = solve_offline_iteration(cfg, q, z0=ref.n_star, nu0=ref.nu_star)
    np.testing.assert_allclose(traj.nu, ref.nu_star, rtol=1e-9)
    np.testing.assert_allclose(traj.z, np.broadcast_to(ref.n_star, traj.z.shape), rtol=1e-9)


def test_offline_iteration_nu_monotone_after_transient():
    traj, sol = solve_offline_iteration(*MCS2, k1=0.5, k2=0.2)
    dist = np.abs(traj.nu - sol.nu_star)
    # once within 1 packet of the limit, nu approaches it monotonically
    start = int(np.argmax(dist < 1.0))
    assert np.all(np.diff(dist[start:]) <= 1e-12)


def test_offline_iteration_reports_non_convergence():
    with pytest.raises(ConvergenceError) as info:
        solve_offline_iteration(*MCS2, max_slots=5)
    assert len(info.value.trajectory.nu) == 6


def test_offline_iteration_rejects_bad_gains():
    with pytest.raises(ValueError):
        solve_offline_iteration(*MCS2, k2=1.0)


# ---------------------------------------------------------------- KKT

def test_kkt_interior():
    sol = solve_fixed_point(*MCS2)
    cert = verify_kkt(sol, *MCS2)
    assert cert.accepted
    assert cert.theta > 0
    np.testing.assert_array_equal(cert.lam, 0)
    assert cert.active_set_complement == [0]


def test_kkt_cap_bound_single_station():
    sol = solve_fixed_point(*MCS9)
    cert = verify_kkt(sol, *MCS9)
    assert cert.accepted
    assert cert.lam[0] > 0
    assert cert.active_set_complement == []


def test_kkt_mixed_interior():
    cfg, q = cfg_of(W2, W4, W9), QosTargets(5e-3, 48)
    sol = solve_fixed_point(cfg, q)
    assert sol.regime is Regime.INTERIOR
    assert verify_kkt(sol, cfg, q).accepted


def test_kkt_perturbed_up_is_infeasible():
    cfg, q = MCS2
    sol = solve_fixed_point(cfg, q)
    bumped = PfSolution(sol.x_star * 1.01, sol.n_star, sol.nu_star, sol.regime, sol.weights)
    with pytest.raises(KktViolationError) as info:
        verify_kkt(bumped, cfg, q)
    assert "delay" in str(info.value)


def test_kkt_perturbed_down_is_not_stationary():
    cfg, q = cfg_of(W2, W9), QosTargets(3e-3, 48)
    sol = solve_fixed_point(cfg, q)
    x = sol.x_star.copy()
    x[0] *= 0.99
    cert = verify_kkt(PfSolution(x, sol.n_star, sol.nu_star, sol.regime, sol.weights), cfg, q)
    assert not cert.accepted


def test_kkt_rejects_mixed_rate_cap_bound_closed_form():
    # With stations of different speeds and a binding aggregation cap the
    # closed form is feasible but not optimal: the oracle does strictly better
    # and its own point passes the certificate.
    cfg, q = cfg_of(W2, W9), QosTargets(20e-3, 48)
    sol = solve_fixed_point(cfg, q)
    assert sol.regime is Regime.CAP_BOUND
    assert not verify_kkt(sol, cfg, q).accepted
    xo = brute_force_oracle(cfg, q)
    assert objective(xo) > sol.objective() + 1e-3
    n_o = aggregation_unprojected(xo, cfg)
    oracle_sol = PfSolution(xo, n_o, 0.0, Regime.CAP_BOUND, sol.weights)
    assert verify_kkt(oracle_sol, cfg, q).accepted


# ---------------------------------------------------------------- oracle

def test_oracle_single_station_closed_form():
    for cfg, q in (MCS2, MCS9):
        w = cfg.w[0]
        expected = min((1 - cfg.c / q.t_bar) / w, q.n_bar / (cfg.c + q.n_bar * w))
        assert brute_force_oracle(cfg, q)[0] == pytest.approx(expected, rel=1e-12)


def test_oracle_symmetric_pair():
    cfg, q = cfg_of(W4, W4), QosTargets(6e-3, 48)
    x = brute_force_oracle(cfg, q)
    assert x[0] == pytest.approx(x[1], rel=1e-6)


def test_oracle_asymmetric_pair_matches_solver():
    cfg, q = cfg_of(1.4122e-4, 3.1754e-5), QosTargets(2.5e-3, 48)
    sol = solve_fixed_point(cfg, q)
    assert sol.regime is Regime.INTERIOR
    np.testing.assert_allclose(brute_force_oracle(cfg, q), sol.x_star, rtol=1e-4)


def test_oracle_is_deterministic():
    cfg, q = cfg_of(W2, W4, W9), QosTargets(5e-3, 48)
    np.testing.assert_array_equal(brute_force_oracle(cfg, q), brute_force_oracle(cfg, q))


def test_oracle_rejects_large_n():
    with pytest.raises(ValueError):
        brute_force_oracle(cfg_of(W9, W9, W9, W9), QosTargets(10e-3, 48))


# ---------------------------------------------------------------- equal airtime

def airtime_spread(cfg, x):
    a = cfg.w * x
    return a.max() / a.min() - 1


@pytest.mark.parametrize("ws", [(W2,), (W2, W9), (W2, W4, W9)])
def test_relaxed_delay_gives_equal_airtime(ws):
    cfg, q = cfg_of(*ws), QosTargets(1e6, 63)
    sol = solve_fixed_point(cfg, q)
    assert airtime_spread(cfg, sol.x_star) < 1e-6
    np.testing.assert_allclose(sol.x_star, equal_airtime_solution(cfg, q), rtol=1e-9)


def test_equal_airtime_without_targets_fills_channel():
    cfg = cfg_of(W2, W9)
    x = equal_airtime_solution(cfg)
    assert airtime_spread(cfg, x) < 1e-12
    assert cfg.w @ x == pytest.approx(1.0, abs=1e-8)
    assert cfg.w @ x < 1


# ---------------------------------------------------------------- properties

phy_w = st.sampled_from([12384 / r for r in (29.3e6, 87.7e6, 175.5e6, 263.3e6, 390e6, 780e6)])


@st.composite
def instances(draw):
    n = draw(st.integers(1, 6))
    w = draw(st.lists(phy_w, min_size=n, max_size=n))
    c = n * draw(st.floats(50e-6, 400e-6))
    t_bar = draw(st.floats(0.5e-3, 30e-3))
    n_bar = draw(st.floats(4, 63))
    return WlanModelConfig(c=c, w=w), QosTargets(t_bar, n_bar)


@settings(max_examples=200)
@given(instances())
def test_regime_dichotomy(inst):
    cfg, q = inst
    sol = solve_fixed_point(cfg, q)
    delay = delay_from_aggregation(sol.n_star, cfg)
    if sol.regime is Regime.INTERIOR:
        assert delay == pytest.approx(q.t_bar, rel=1e-6)
    elif sol.regime is Regime.CAP_BOUND:
        assert delay <= q.t_bar * (1 + 1e-9)
        assert np.max(sol.n_star) == pytest.approx(q.n_bar)
    else:
        assert sol.nu_star == 1 and delay > q.t_bar


@settings(max_examples=200)
@given(instances())
def test_uncapped_stations_share_airtime(inst):
    cfg, q = inst
    sol = solve_fixed_point(cfg, q)
    free = sol.n_star < q.n_bar * (1 - 1e-9)
    level = sol.n_star[free] * cfg.w[free]
    if level.size > 1:
        np.testing.assert_allclose(level, level[0], rtol=1e-9)
