import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtr

from tailsafe._validation import InsufficientGridError
from tailsafe.localvol import (CallPriceGrid, DupireLocalVol, LocalVolGrid, all_partials, call_price_grid,
                               dupire_local_variance, fd_partials, fd_weights, interp_local_vol)
from tailsafe.market_shell import FlatVolSource
from tailsafe.verification import refine_log_grid

S0, R, Q = 4800.0, 0.02, 0.015
K41 = S0 * np.exp(np.linspace(np.log(0.7), np.log(1.3), 41))
T6 = np.array([7, 14, 30, 60, 90, 180]) / 365.0


def _tensor(fn, K, T):
    return CallPriceGrid(K, T, fn(K[:, None], T[None, :]), 0.0, 0.0, 100.0)


def _bs_greeks(K, T, s=0.2):
    KK, TT = K[:, None], T[None, :]
    d1 = (np.log(S0 / KK) + (R - Q + s * s / 2) * TT) / (s * np.sqrt(TT))
    d2 = d1 - s * np.sqrt(TT)
    pdf1 = np.exp(-d1 ** 2 / 2) / np.sqrt(2 * np.pi)
    pdf2 = np.exp(-d2 ** 2 / 2) / np.sqrt(2 * np.pi)
    dT = (S0 * np.exp(-Q * TT) * pdf1 * s / (2 * np.sqrt(TT)) - Q * S0 * np.exp(-Q * TT) * ndtr(d1)
          + R * KK * np.exp(-R * TT) * ndtr(d2))
    dK = -np.exp(-R * TT) * ndtr(d2)
    dKK = np.exp(-R * TT) * pdf2 / (KK * s * np.sqrt(TT))
    return dT, dK, dKK


def _refined(level):
    K = refine_log_grid(K41, level)
    T = [T6[0]]
    for a, b in zip(T6[:-1], T6[1:]):
        T.extend(np.linspace(a, b, level + 1)[1:])
    return K, np.array(T)


# fd_partials

def test_affine_in_K_has_zero_curvature():
    K = np.array([90.0, 95.0, 101.0, 104.0, 110.0])
    g = _tensor(lambda K, T: 3.0 + 0.5 * K + 0 * T, K, np.array([0.1, 0.2, 0.4]))
    for i in range(K.size):
        assert fd_partials(g, i, 1)[2] == pytest.approx(0.0, abs=1e-10)


def test_quadratic_in_K_recovers_curvature():
    K = np.linspace(80, 120, 9)
    g = _tensor(lambda K, T: 0.01 * K ** 2 + T, K, np.array([0.1, 0.2, 0.4]))
    for i in range(K.size):
        dT, dK, dKK = fd_partials(g, i, 1, "linear")
        assert dKK == pytest.approx(0.02, rel=1e-9)
        assert dK == pytest.approx(0.02 * K[i], rel=1e-9)
        assert dT == pytest.approx(1.0, rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.05, 3.0), min_size=2, max_size=2), st.floats(-1, 1))
def test_first_derivative_stencil_exact_on_quadratics(gaps, x0_shift):
    x = np.cumsum([0.0] + gaps)
    w = fd_weights(x, x[1], 1)
    assert float(w @ (3 * x ** 2 + x0_shift * x + 1)) == pytest.approx(6 * x[1] + x0_shift, abs=1e-8)


def test_partials_converge_at_second_order():
    errs = []
    for level in (1, 2, 4, 8):
        K, T = _refined(level)
        g = call_price_grid(FlatVolSource(0.2, S0, R, Q), K, T)
        p = all_partials(g)
        exact = _bs_greeks(K, T)
        core = np.abs(np.log(K[:, None] / S0)) <= 0.2 * np.sqrt(T[None, :])
        core[[0, -1], :] = False
        core[:, [0, -1]] = False
        core = core[::level, ::level]
        errs.append([float((np.abs(a - b) / np.abs(b))[::level, ::level][core].max())
                     for a, b in zip((p.dT, p.dK, p.dKK), exact)])
    errs = np.array(errs)
    ratios = errs[:-1] / errs[1:]
    assert np.all(ratios > 3.5)
    # the relative 1e-3 tolerance is reached once both meshes are refined 8x
    assert np.all(errs[-1] < 1e-3)


def test_too_small_grid_rejected():
    g = _tensor(lambda K, T: K + T, np.array([90.0, 100.0]), np.array([0.1, 0.2, 0.3]))
    with pytest.raises(InsufficientGridError):
        all_partials(g)


# dupire_local_variance

def test_flat_vol_recovered_in_the_core():
    g = call_price_grid(FlatVolSource(0.2, S0, R, Q), K41, T6)
    lv = dupire_local_variance(g)
    k = np.log(K41 / S0)[:, None]
    core = np.abs(k) <= 2 * 0.2 * np.sqrt(T6[None, :])
    core[[0, -1], :] = False
    core[:, [0, -1]] = False
    err = np.abs(lv.vol - 0.2)[core & ~lv.clip_mask]
    assert err.max() <= 1e-2


def test_zero_numerator_gives_zero_variance():
    K = np.linspace(80, 120, 9)
    T = np.array([0.1, 0.2, 0.3])
    # time-independent, zero rates: numerator dC/dT is exactly 0
    g = CallPriceGrid(K, T, np.repeat((0.01 * (K - 70.0) ** 2)[:, None], 3, axis=1), 0.0, 0.0, 100.0)
    lv = dupire_local_variance(g)
    assert np.max(lv.nodes) <= 1e-14


def test_clipped_node_uses_floor():
    K = np.linspace(80, 120, 9)
    T = np.array([0.1, 0.2, 0.3])
    chi = 1e-3
    C = np.outer(0.5 * (chi / 2) * (K - 70) ** 2, np.ones(3)) + np.outer(np.ones(9), T)
    g = CallPriceGrid(K, T, C, 0.0, 0.0, 100.0)
    lv = dupire_local_variance(g, chi_floor=chi, time_coordinate="linear")
    assert lv.clip_mask.all()
    # numerator dC/dT = 1, denominator uses the floor in place of the raw chi/2
    expected = np.broadcast_to(1.0 / (0.5 * K[:, None] ** 2 * chi), lv.nodes.shape)
    np.testing.assert_allclose(lv.nodes, expected, rtol=1e-9)


# interp_local_vol

def _lv():
    K = np.array([90.0, 100.0, 110.0])
    T = np.array([0.1, 0.2])
    vol = np.array([[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]])
    return LocalVolGrid(K, T, vol ** 2, 1e-7, np.zeros_like(vol, dtype=bool))


def test_interp_at_node():
    assert interp_local_vol(_lv(), 100.0, 0.2) == pytest.approx(0.4, abs=1e-15)


def test_interp_midpoint_in_K():
    assert interp_local_vol(_lv(), 95.0, 0.1) == pytest.approx(0.2, abs=1e-15)


def test_interp_clamps_beyond_grid():
    assert interp_local_vol(_lv(), 500.0, 0.2) == pytest.approx(0.6, abs=1e-15)
    assert interp_local_vol(_lv(), 1.0, 5.0) == pytest.approx(0.2, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.floats(50, 150), st.floats(0.0, 0.5))
def test_interp_within_node_range(S, t):
    v = interp_local_vol(_lv(), S, t)
    assert 0.1 - 1e-15 <= v <= 0.6 + 1e-15


def test_estimator_wrapper():
    g = call_price_grid(FlatVolSource(0.2, S0, R, Q), K41, T6)
    est = DupireLocalVol().fit(g)
    assert est.get_params()["chi_floor"] == 1e-7
    assert est.predict(S0, 30 / 365) == pytest.approx(0.2, abs=5e-3)
