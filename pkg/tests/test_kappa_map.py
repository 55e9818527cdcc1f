import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tailsafe.blackscholes import bs_vega
from tailsafe.kappa_map import (DegenerateBumpError, KappaMapEstimator, build_kappa_curve, bump_and_invert,
                                index_bump_response, shrink_expiry, smooth_curve)
from tailsafe.market_shell import FlatVolSource, SsviSlice, VolSurface, validate_no_arbitrage
from tailsafe.vix_engine import VixContext, half_interval_weights, minute_weights

S0 = 4800.0
K41 = S0 * np.exp(np.linspace(np.log(0.7), np.log(1.3), 41))
CTX = VixContext(K41, 14, 60)


def test_zero_remaining_mass_gives_zero():
    src = FlatVolSource(0.2, S0, 0.02, 0.015)
    assert bump_and_invert(src, CTX, 20 / 365, masses=(0.0, 1.0, 1.0)) == 0.0


def test_zero_index_mass_is_degenerate():
    src = FlatVolSource(0.2, S0, 0.02, 0.015)
    with pytest.raises(DegenerateBumpError):
        bump_and_invert(src, CTX, 20 / 365, masses=(1.0, 0.0, 0.0))


def test_flat_world_matches_vega_ratio():
    r, q, sigma = 0.02, 0.015, 0.2
    src = FlatVolSource(sigma, S0, r, q)
    ret = CTX.retained(src)
    T1, T2 = CTX.maturities
    kappa = bump_and_invert(src, CTX, T1, eps=1e-4, retained=ret)
    lams = minute_weights(*CTX.minutes)
    agg = 0.0
    for lam, T, K in zip(lams, (T1, T2), ret):
        dK = half_interval_weights(K)
        agg += lam * T * (365 / 30) * (2 / T) * np.sum(dK * math.exp(r * T) / K ** 2 * bs_vega(S0, K, T, r, q, sigma))
    oracle = bs_vega(S0, S0, T1, r, q, sigma) / agg
    assert kappa == pytest.approx(float(oracle), rel=1e-4)


def _random_surface(rng):
    mats = np.array([7, 14, 30, 60, 90, 180]) / 365
    atm = np.sort(rng.uniform(0.12, 0.35, 6))
    rho = rng.uniform(-0.9, 0.3)
    phi = rng.uniform(0.0, 3.0)
    slices = [SsviSlice(T, a * a * T, rho, phi) for T, a in zip(mats, atm)]
    return VolSurface(slices, S0, 0.02, 0.015)


def test_kappa_positive_on_random_surfaces():
    rng = np.random.default_rng(2024)
    mats = np.array([2, 10, 30, 60]) / 365
    checked = 0
    while checked < 100:
        s = _random_surface(rng)
        if not validate_no_arbitrage(s).ok:
            continue
        checked += 1
        curve = build_kappa_curve(s, CTX, mats)
        assert np.all(curve.kappa_raw > 0) and np.all(curve.kappa_eff > 0)


def test_index_response_scales_with_eps(surface, context):
    a = index_bump_response(surface, context, 1e-3)
    b = index_bump_response(surface, context, 2e-3)
    assert b / a == pytest.approx(2.0, rel=1e-3)


# smooth_curve

@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20))
def test_identity_kernel(values):
    np.testing.assert_array_equal(smooth_curve(values, (1.0,)), values)


@settings(max_examples=40, deadline=None)
@given(st.floats(-5, 5), st.integers(1, 15))
def test_constant_preserved(c, n):
    np.testing.assert_allclose(smooth_curve([c] * n), c, rtol=1e-14, atol=1e-14)


def test_kernel_centre_value():
    assert smooth_curve([0.0, 1.0, 0.0])[1] == 0.5


def test_bad_kernels_rejected():
    with pytest.raises(ValueError):
        smooth_curve([1, 2, 3], (0.5, 0.5))
    with pytest.raises(ValueError):
        smooth_curve([1, 2, 3], (0.2, 0.2, 0.2))


# shrink_expiry

def test_no_shrink_cases():
    assert shrink_expiry(0.7, 0.01, 0.2, 0.0) == 0.7
    assert shrink_expiry(0.7, 0.2, 0.2, 3.0) == 0.7


def test_half_shrink_at_expiry():
    assert shrink_expiry(1.0, 0.0, 0.2, 1.0) == 0.5


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 10), st.floats(0, 1), st.floats(0, 5))
def test_shrink_bounded_by_smoothed(sm, T, mu):
    out = shrink_expiry(sm, T, 0.5, mu)
    assert sm / (1 + mu) - 1e-12 <= out <= sm + 1e-12


# curve and estimator

def test_curve_pinned_at_expiry(world):
    assert world.kappa(0.0) == 0.0
    assert world.kappa(world.kappa.maturities[-1]) == pytest.approx(world.kappa.kappa_eff[-1])


def test_estimator_round_trip(surface, context):
    mats = np.array([5, 20, 40]) / 365
    est = KappaMapEstimator(mu_shrink=0.5).fit(surface, context=context, maturities=mats)
    np.testing.assert_allclose(est.predict(mats), est.curve_.kappa_eff)
    assert est.get_params()["mu_shrink"] == 0.5
