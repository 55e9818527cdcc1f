import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from tailsafe._validation import InsufficientGridError
from tailsafe.blackscholes import bs_price
from tailsafe.kappa_map import VolBump
from tailsafe.market_shell import FlatVolSource
from tailsafe.vix_engine import (BracketError, GridMismatchError, OptionGrid, VixContext, build_option_grid,
                                 coherence_residual, combine_30d, half_interval_weights, minute_weights,
                                 prune_wings, single_maturity_variance, vix_30d)

MIN_DAY = 1440


def _grid_with_bids(put_bids_outward, call_bids_outward=()):
    """Grid with K0 = 100 in the middle and the given bids walking outward on each wing."""
    n_p, n_c = len(put_bids_outward), len(call_bids_outward)
    K = np.array([100.0 - 5 * (n_p - i) for i in range(n_p)] + [100.0] + [100.0 + 5 * (i + 1) for i in range(n_c)])
    put_bid = np.concatenate([np.asarray(put_bids_outward, dtype=float)[::-1], [1.0], np.ones(n_c)])
    call_bid = np.concatenate([np.ones(n_p), [1.0], np.asarray(call_bids_outward, dtype=float)])
    ones = np.ones_like(K)
    return OptionGrid(0.1, 100.0, K, ones, ones, call_bid, put_bid, 0.0)


# prune_wings

def test_double_zero_stops_the_walk():
    g = _grid_with_bids([1.2, 0, 0, 0.5])
    kept = prune_wings(g)
    assert kept.tolist() == [95.0, 100.0]


def test_all_positive_bids_keep_everything():
    g = _grid_with_bids([1, 2, 3], [3, 2, 1])
    assert prune_wings(g).tolist() == g.strikes.tolist()


def test_isolated_zero_is_skipped():
    # walking outward: (1.0, 0, 1.0, 0, 0); three wing strikes precede the trailing double zero
    g = _grid_with_bids([1.0, 0, 1.0, 0, 0])
    kept = prune_wings(g)
    assert kept.tolist() == [85.0, 90.0, 95.0, 100.0]


def test_call_wing_pruned_symmetrically():
    g = _grid_with_bids([1.0], [0.3, 0, 0, 2.0])
    assert prune_wings(g).tolist() == [95.0, 100.0, 105.0]


# half_interval_weights

def test_weights_three_strikes():
    np.testing.assert_allclose(half_interval_weights([100, 110, 125]), [10, 12.5, 15])


def test_weights_uniform_grid():
    np.testing.assert_allclose(half_interval_weights(np.arange(5) * 2.5 + 90), 2.5)


def test_weights_four_strikes():
    np.testing.assert_allclose(half_interval_weights([90, 100, 101, 120]), [10, 5.5, 10, 19])


def test_weights_need_two_strikes():
    with pytest.raises(InsufficientGridError):
        half_interval_weights([100.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.1, 10), min_size=2, max_size=30))
def test_weight_identity(steps):
    K = 50.0 + np.cumsum(steps)
    K = np.concatenate([[50.0], K])
    w = half_interval_weights(K)
    d = np.diff(K)
    # interior weights are the trapezoid weights; the ends carry a full cell each
    assert w.sum() == pytest.approx((K[-1] - K[0]) + 0.5 * (d[0] + d[-1]), rel=1e-12)


# single_maturity_variance

def _flat_grid(sigma, T, K, r=0.01, q=0.0, S0=100.0):
    return build_option_grid(FlatVolSource(sigma, S0, r, q), T, K)


def test_correction_vanishes_when_forward_is_a_strike():
    K = np.linspace(60, 140, 81)
    g = _flat_grid(0.2, 0.25, K, r=0.0)
    b = single_maturity_variance(g, K)
    assert g.K0 == 100.0 and b.correction == 0.0


def test_flat_vol_variance_matches_integral_oracle():
    T, r, S0 = 30 / 365, 0.01, 100.0
    K = np.linspace(40, 200, 3201)
    g = _flat_grid(0.2, T, K, r=r, S0=S0)
    var = single_maturity_variance(g, K).variance
    F = S0 * math.exp(r * T)
    K0 = g.K0

    def q(k):
        return bs_price(S0, k, T, r, 0.0, 0.2, is_call=k >= K0)

    put = integrate.quad(lambda k: q(k) / k ** 2, 1e-6, K0, limit=200)[0]
    call = integrate.quad(lambda k: q(k) / k ** 2, K0, 5 * S0, limit=200)[0]
    oracle = 2 / T * math.exp(r * T) * (put + call) - (F / K0 - 1) ** 2 / T
    assert var == pytest.approx(oracle, abs=2e-5)
    assert var == pytest.approx(0.04, abs=2e-4)


def test_summation_linear_in_prices():
    K = np.linspace(60, 140, 41)
    g = _flat_grid(0.2, 0.25, K)
    g2 = OptionGrid(g.maturity_T, g.forward_F, g.strikes, 2 * g.call_mid, 2 * g.put_mid, g.call_bid,
                    g.put_bid, g.rate_r, g.K0)
    a, b = single_maturity_variance(g, K), single_maturity_variance(g2, K)
    np.testing.assert_allclose(b.contributions, 2 * a.contributions, rtol=1e-15)


def test_retained_set_must_contain_K0():
    K = np.linspace(60, 140, 41)
    g = _flat_grid(0.2, 0.25, K)
    with pytest.raises(ValueError):
        single_maturity_variance(g, K[:5])


# vix_30d

def test_equal_variances_give_vix_20():
    w_star, s2, vix, floored = combine_30d(0.04, 0.04, 14 * MIN_DAY, 30 * MIN_DAY)
    assert s2 == pytest.approx(0.04, rel=1e-14) and vix == pytest.approx(20.0, rel=1e-14) and not floored


@settings(max_examples=50, deadline=None)
@given(st.floats(1, 29.9), st.floats(30, 400))
def test_minute_weights_sum_to_one(d1, d2):
    l1, l2 = minute_weights(d1 * MIN_DAY, d2 * MIN_DAY)
    assert l1 + l2 == pytest.approx(1.0, abs=1e-14)


def test_non_bracketing_pair_rejected():
    with pytest.raises(BracketError):
        minute_weights(35 * MIN_DAY, 60 * MIN_DAY)


def test_variance_floor_applied():
    _, s2, vix, floored = combine_30d(0.0, 0.0, 14 * MIN_DAY, 60 * MIN_DAY, variance_floor=1e-6)
    assert floored and vix == pytest.approx(0.1)


def test_vix_30d_flat_world():
    K = np.linspace(40, 220, 721)
    g1, g2 = _flat_grid(0.2, 14 / 365, K), _flat_grid(0.2, 60 / 365, K)
    res = vix_30d(g1, g2, 14 * MIN_DAY, 60 * MIN_DAY)
    assert res.vix_30 == pytest.approx(20.0, abs=0.02)


# coherence

def test_desk_world_coherence(surface, teacher, context):
    res = coherence_residual(teacher, surface, context)
    # order 1e-3 index points on the desk world
    assert 1e-4 < res.residual < 1e-2
    assert res.passed and res.residual <= res.bound_terms["bound_sharp"]


def test_identical_surfaces_zero_residual(surface, context):
    assert coherence_residual(surface, surface, context).residual == 0.0


def test_residual_linear_in_constant_shift(surface, context):
    T1, T2 = context.maturities
    ret = context.retained(surface)
    deltas = np.array([1e-4, 3e-4, 1e-3, 3e-3, 1e-2])
    res = [coherence_residual(VolBump(surface, {T1: d, T2: d}), surface, context, ret).residual for d in deltas]
    slope = np.polyfit(np.log(deltas), np.log(res), 1)[0]
    assert slope == pytest.approx(1.0, abs=0.05)


def test_retained_strikes_must_come_from_context(surface, context):
    with pytest.raises(GridMismatchError):
        coherence_residual(surface, surface, context, (np.array([4801.0]), np.array([4802.0])))
