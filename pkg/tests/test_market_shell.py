import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tailsafe._validation import DomainError
from tailsafe.market_shell import (AslClosure, AtmJet, BasisTerm, CalendarAdjustmentError, FlatVolSource,
                                   SsviSlice, VolSurface, attach_teacher, enforce_calendar_monotone,
                                   eval_total_variance, extract_atm_jet, power_basis, teacher_vol,
                                   validate_no_arbitrage)


def _surface(thetas, rho=0.0, phi=0.0, spot=100.0):
    mats = [0.1 * (i + 1) for i in range(len(thetas))]
    return VolSurface([SsviSlice(t, th, rho, phi) for t, th in zip(mats, thetas)], spot)


class _SmileSource:
    """Implied-vol source defined by a function of k, constant in T."""

    def __init__(self, fn):
        self.fn = fn
        self.k_corridor = (-0.3, 0.3)

    def implied_vol(self, k, T, extrapolate=False):
        return self.fn(np.asarray(k, dtype=float))


# eval_total_variance

def test_atm_total_variance_equals_theta(surface):
    for s in surface.slices:
        assert eval_total_variance(surface, 0.0, s.maturity_T) == pytest.approx(s.theta, rel=1e-14)


def test_flat_smile_degenerate_case():
    s = _surface([0.04])
    ks = np.linspace(-0.5, 0.5, 11)
    np.testing.assert_allclose(eval_total_variance(s, ks, 0.1), 0.04, rtol=0, atol=1e-15)


def test_total_variance_matches_high_precision_value():
    # mpmath, 50 digits: 0.02 * (1 - 0.1 + sqrt(0.84))
    frozen = 0.036330302779823360
    w = SsviSlice(1.0, 0.04, -0.5, 2.0).total_variance(0.1)
    assert w == pytest.approx(frozen, rel=1e-14)


def test_total_variance_is_linear_in_T_between_slices():
    s = _surface([0.04, 0.08])
    assert eval_total_variance(s, 0.0, 0.15) == pytest.approx(0.06, rel=1e-14)


def test_out_of_range_maturity_raises():
    with pytest.raises(DomainError):
        eval_total_variance(_surface([0.04, 0.05]), 0.0, 5.0)


@settings(max_examples=60, deadline=None)
@given(theta=st.floats(1e-4, 0.5), rho=st.floats(-0.95, 0.95), phi=st.floats(0, 5),
       k=st.floats(-1.0, 1.0))
def test_total_variance_nonnegative(theta, rho, phi, k):
    assert SsviSlice(1.0, theta, rho, phi).total_variance(k) >= 0.0


# validate_no_arbitrage

def test_butterfly_failure_reported():
    rep = validate_no_arbitrage(VolSurface([SsviSlice(0.5, 0.04, -0.5, 10.0)], 100.0))
    assert rep.g1[0] == pytest.approx(3.6)
    assert rep.g2[0] == pytest.approx(-1.0)
    assert not rep.butterfly_ok and not rep.ok


def test_flat_slice_passes_butterfly():
    rep = validate_no_arbitrage(_surface([0.04]))
    assert rep.g1 == [4.0] and rep.g2 == [4.0] and rep.ok


def test_calendar_violation_at_every_k():
    rep = validate_no_arbitrage(_surface([0.05, 0.04]), n_k=31)
    assert len(rep.calendar_violations) == 31
    assert "status=fail" in rep.to_text()


def test_desk_surface_is_arbitrage_free(surface):
    rep = validate_no_arbitrage(surface)
    assert rep.ok and rep.teacher_clamped == 0


# enforce_calendar_monotone

def test_running_maximum_of_theta():
    adj = enforce_calendar_monotone(_surface([0.04, 0.03, 0.05]))
    assert [s.theta for s in adj.slices] == [0.04, 0.04, 0.05]


def test_monotone_input_unchanged():
    s = _surface([0.03, 0.04, 0.05], rho=-0.3, phi=1.0)
    assert enforce_calendar_monotone(s).slices == s.slices


def test_adjustment_that_breaks_butterfly_raises():
    with pytest.raises(CalendarAdjustmentError):
        enforce_calendar_monotone(_surface([1.1, 0.9], phi=4.0))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.005, 0.2), min_size=2, max_size=6), st.floats(-0.8, 0.8), st.floats(0, 2))
def test_adjusted_surface_is_calendar_monotone(thetas, rho, phi):
    s = _surface(thetas, rho, phi)
    adj = enforce_calendar_monotone(s)
    assert validate_no_arbitrage(adj).calendar_ok


# extract_atm_jet and teacher_vol

def test_jet_of_flat_smile():
    jet = extract_atm_jet(_SmileSource(lambda k: 0.2 + 0 * k), 0.1)
    assert (jet.level_L, jet.slope_S, jet.curvature_C) == (0.2, 0.0, 0.0)


def test_jet_of_affine_smile():
    jet = extract_atm_jet(_SmileSource(lambda k: 0.2 + 0.1 * k), 0.1)
    assert jet.level_L == 0.2
    assert jet.slope_S == pytest.approx(0.1, abs=1e-14)
    assert jet.curvature_C == pytest.approx(0.0, abs=1e-10)


def test_jet_of_quadratic_smile():
    jet = extract_atm_jet(_SmileSource(lambda k: 0.2 + 0.05 * k * k), 0.1, h=0.01)
    assert jet.curvature_C == pytest.approx(0.1, abs=1e-10)
    assert jet.slope_S == pytest.approx(0.0, abs=1e-12)


def test_jet_step_too_wide_for_corridor():
    with pytest.raises(DomainError):
        extract_atm_jet(_SmileSource(lambda k: 0.2 + 0 * k), 0.1, h=0.2)


def _jet(L, S, C):
    return AtmJet(L, S, C, 0.01)


def test_teacher_vol_jet_only():
    c = AslClosure(_jet(0.2, -0.1, 0.5))
    assert teacher_vol(c, 0.0, 0.1) == 0.2
    assert teacher_vol(c, 0.2, 0.1) == pytest.approx(0.19, abs=1e-15)


def test_teacher_vol_with_cubic_term():
    c0 = AslClosure(_jet(0.2, -0.1, 0.5))
    c1 = AslClosure(_jet(0.2, -0.1, 0.5), (1.0,), (power_basis(3),))
    assert teacher_vol(c1, 0.1, 0.1) == pytest.approx(teacher_vol(c0, 0.1, 0.1) + 0.001, abs=1e-15)


def test_teacher_vol_floor_flagged():
    c = AslClosure(_jet(0.01, 1.0, 0.0), vol_floor=1e-4)
    sig, flags = teacher_vol(c, np.array([-0.5, 0.0]), 0.1, return_flags=True)
    assert sig[0] == 1e-4 and flags.tolist() == [True, False]


def test_power_basis_is_exact():
    for p in (3, 4):
        psi = power_basis(p)
        np.testing.assert_array_equal(psi(np.array([-0.2, 0.0, 0.3]), 0.1), np.array([-0.2, 0.0, 0.3]) ** p)


def test_recentred_basis_terms_have_zero_jet():
    terms = [BasisTerm(lambda k, T: np.sin(3 * k) + np.exp(k), "mix"), BasisTerm(lambda k, T: k * k * T, "quad")]
    for psi in terms:
        h = psi.h
        v = np.asarray(psi(np.array([-h, 0.0, h]), 0.1))
        assert abs(v[1]) <= 1e-12
        assert abs((v[2] - v[0]) / (2 * h)) <= 1e-12
        assert abs((v[2] - 2 * v[1] + v[0]) / h ** 2) <= 1e-6


def test_power_basis_rejects_low_order():
    with pytest.raises(ValueError):
        power_basis(2)


def test_teacher_reproduces_surface_jet(surface, teacher):
    for j, T in enumerate(surface.maturities):
        a, b = extract_atm_jet(surface, T), extract_atm_jet(teacher, T)
        assert b.level_L == pytest.approx(a.level_L, rel=1e-12)
        assert b.slope_S == pytest.approx(a.slope_S, rel=1e-9)
        assert b.curvature_C == pytest.approx(a.curvature_C, rel=1e-6)


def test_attach_teacher_with_coefficients():
    s = _surface([0.04, 0.05], rho=-0.3, phi=1.0)
    t = attach_teacher(s, basis=[power_basis(3)], coeffs=[[0.1], [0.2]])
    assert t.teacher[1].aux_coeffs == (0.2,)


def test_flat_source_is_flat():
    f = FlatVolSource(0.25, 100.0, 0.01, 0.0)
    assert f.implied_vol_at_strike(np.array([50.0, 100.0, 200.0]), 3.0).tolist() == [0.25] * 3
    assert f.forward(1.0) == pytest.approx(100 * math.exp(0.01))
