import math

import mpmath
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deer.noise_lab import (
    DEFAULT_GRID,
    NoiseDomainError,
    NoiseScenario,
    analytic_fp_avg,
    analytic_fp_mad_approx,
    analytic_fp_single,
    grid_scenarios,
    mc_all_strategies,
    mc_counts,
    mc_expected_mad,
    mc_false_positive,
    normal_sf,
    ordering_violations,
    snr_exceedance,
    sweep,
)

# 1 - Phi(x), evaluated with mpmath at 30 digits
SF = {
    1.0: 0.15865525393145705,
    2.0: 0.022750131948179207,
    3.6: 0.00015910859015753383,
    1.6: 0.054799291699557984,
}
BASE = NoiseScenario(mu=0.9, lam=0.95, sigma=0.05, n=4, alpha=1.0, trials=20_000)


@pytest.mark.parametrize("x", sorted(SF))
def test_normal_sf_frozen(x):
    assert normal_sf(x) == pytest.approx(SF[x], rel=1e-13)


@given(st.floats(-8, 8))
def test_normal_sf_against_mpmath(x):
    mpmath.mp.dps = 30
    ref = float(mpmath.ncdf(-x))
    assert normal_sf(x) == pytest.approx(ref, rel=1e-12, abs=1e-300)


def test_closed_forms():
    assert analytic_fp_single(BASE) == pytest.approx(SF[1.0], rel=1e-12)
    assert analytic_fp_avg(BASE) == pytest.approx(SF[2.0], rel=1e-12)
    assert analytic_fp_mad_approx(BASE) == pytest.approx(SF[3.6], rel=1e-12)


def test_high_noise_limits():
    sc = NoiseScenario(mu=0.9499, lam=0.95, sigma=1e6)
    assert analytic_fp_single(sc) == pytest.approx(0.5, abs=1e-6)
    assert analytic_fp_mad_approx(sc) == pytest.approx(SF[1.6], abs=1e-6)


@given(st.floats(0.01, 0.9), st.floats(0.001, 5), st.integers(2, 64))
def test_avg_below_single(gap, sigma, n):
    sc = NoiseScenario(mu=0.95 - gap, lam=0.95, sigma=sigma, n=n)
    assert analytic_fp_avg(sc) < analytic_fp_single(sc) or analytic_fp_single(sc) == 0.0


@pytest.mark.parametrize("kw", [dict(mu=0.96), dict(sigma=0), dict(n=0), dict(alpha=-1), dict(trials=0)])
def test_domain(kw):
    with pytest.raises(NoiseDomainError):
        NoiseScenario(**{**dict(mu=0.9, lam=0.95, sigma=0.05), **kw}).validate()


def test_mc_reproducible_and_worker_independent():
    a = mc_counts(BASE)
    b = mc_counts(BASE, workers=2)
    assert (a == b).all()
    other = mc_counts(NoiseScenario(**{**BASE.__dict__, "seed": 1}))
    assert (a != other).any()


def test_mc_matches_single_at_small_scale():
    est = mc_false_positive(BASE, "single")
    assert abs(est.empirical_rate - SF[1.0]) <= 4 * est.standard_error
    assert est.analytic_rate == pytest.approx(SF[1.0])


def test_mc_strategies_share_draws():
    est = mc_all_strategies(BASE)
    assert est["mad_exact"].empirical_rate <= est["avg"].empirical_rate <= est["single"].empirical_rate
    assert est["mad_exact"].analytic_rate is None


def test_alpha_zero_equals_avg():
    sc = NoiseScenario(**{**BASE.__dict__, "alpha": 0.0})
    est = mc_all_strategies(sc)
    assert est["mad_exact"].empirical_rate == est["avg"].empirical_rate


def test_expected_mad_small_n_bias():
    # sample MAD for n=2 is |x1 - x2| / 2, mean sigma / sqrt(pi)
    assert mc_expected_mad(1.0, 2, trials=40_000) == pytest.approx(1 / math.sqrt(math.pi), abs=0.01)
    assert mc_expected_mad(1.0, 1, trials=3) == 0.0


def test_snr_exceedance_bounds_calibrated_rate():
    p = snr_exceedance(4, 1.0, trials=100_000)
    sc = NoiseScenario(mu=0.9499, lam=0.95, sigma=1e3, n=4, alpha=1.0, trials=100_000)
    est = mc_false_positive(sc, "mad_exact")
    assert est.empirical_rate <= p + 3 * math.sqrt(p * (1 - p) / 100_000)
    with pytest.raises(NoiseDomainError):
        snr_exceedance(1, 1.0)


def test_small_sweep_has_no_ordering_violations():
    rows = sweep(grid_scenarios({"mu": [0.9], "sigma": [0.05, 1.0], "n": [2, 4]}, 5000, 0))
    assert len(rows) == 2 * 2 * len(DEFAULT_GRID["alpha"]) * 4
    assert ordering_violations(rows) == []


def test_unknown_grid_key():
    with pytest.raises(NoiseDomainError):
        grid_scenarios({"beta": [1]}, 10, 0)


@pytest.mark.parametrize("sigma", [0.2, 1.0])
def test_mad_to_avg_ratio_falls_with_n(sigma):
    ratios = []
    for n in (2, 4, 8):
        est = mc_all_strategies(NoiseScenario(mu=0.9, lam=0.95, sigma=sigma, n=n, trials=100_000))
        ratios.append(est["mad_exact"].empirical_rate / est["avg"].empirical_rate)
    assert ratios == sorted(ratios, reverse=True) and ratios[-1] < 0.1
