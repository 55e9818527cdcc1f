"""Option-price sensitivity to a 30-day variance shock, by bump-and-invert.

A uniform implied-vol bump of size eps is applied to the hedged maturity and to
the two index maturities.  The ratio of the central price change of the ATM call
to the central change in the 30-day variance gives kappa(T_rem).  The raw curve
is then averaged with a nonnegative kernel and shrunk near expiry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_increasing, check_positive
from .blackscholes import bs_price
from .vix_engine import VixContext

DEFAULT_EPS = 1e-3
DEFAULT_MASSES = (1.0, 1.0, 1.0)
DEFAULT_KERNEL = (0.25, 0.5, 0.25)
DENOMINATOR_FLOOR = 1e-14


class DegenerateBumpError(ArithmeticError):
    """The bumped 30-day variance did not move."""


class VolBump:
    """Implied-vol source shifted by a constant at selected maturities."""

    def __init__(self, base, shifts: dict[float, float]):
        self.base = base
        self.shifts = dict(shifts)
        self.spot_S0 = base.spot_S0
        self.rate_r = base.rate_r
        self.div_q = base.div_q

    def forward(self, T):
        return self.base.forward(T)

    def shift(self, T: float) -> float:
        return sum(s for t, s in self.shifts.items() if math.isclose(t, T, rel_tol=1e-12, abs_tol=1e-14))

    def implied_vol_at_strike(self, K, T: float, *, extrapolate: bool = False):
        return self.base.implied_vol_at_strike(K, T, extrapolate=extrapolate) + self.shift(T)


def _index_level(source, context: VixContext, retained, level: str) -> float:
    res = context.evaluate(source, retained)
    if level == "variance":
        return res.sigma2_30
    if level == "vix":
        return res.vix_30
    raise ValueError(f"level must be 'variance' or 'vix', got {level!r}")


def index_bump_response(source, context: VixContext, eps: float = DEFAULT_EPS,
                        masses=(1.0, 1.0), retained=None, level: str = "variance") -> float:
    """Central change nu(+eps) - nu(-eps) of the 30-day index under the bracketing bumps."""
    check_positive("eps", eps)
    if retained is None:
        retained = context.retained(source)
    T1, T2 = context.maturities
    b1, b2 = masses
    up = VolBump(source, {T1: b1 * eps, T2: b2 * eps})
    dn = VolBump(source, {T1: -b1 * eps, T2: -b2 * eps})
    return _index_level(up, context, retained, level) - _index_level(dn, context, retained, level)


def bump_and_invert(source, context: VixContext, T_rem: float, eps: float = DEFAULT_EPS,
                    masses=DEFAULT_MASSES, *, strike: float | None = None, retained=None,
                    level: str = "variance", d_index: float | None = None) -> float:
    """kappa(T_rem) = [C(+eps) - C(-eps)] / [nu30(+eps) - nu30(-eps)] on fixed retained grids.

    ``d_index`` lets a caller reuse one index response across many T_rem.
    """
    check_positive("eps", eps)
    check_positive("T_rem", T_rem)
    b_rem, b1, b2 = (float(b) for b in masses)
    if min(b_rem, b1, b2) < 0:
        raise ValueError("bump masses must be nonnegative")
    if d_index is None:
        d_index = index_bump_response(source, context, eps, (b1, b2), retained, level)
    if not abs(d_index) >= DENOMINATOR_FLOOR:
        raise DegenerateBumpError(f"index response {d_index:.3g} below {DENOMINATOR_FLOOR}")
    K = source.spot_S0 if strike is None else float(strike)
    sig = float(source.implied_vol_at_strike(K, T_rem, extrapolate=True))
    args = (source.spot_S0, K, T_rem, source.rate_r, source.div_q)
    d_price = bs_price(*args, sig + b_rem * eps) - bs_price(*args, sig - b_rem * eps)
    return float(d_price / d_index)


def smooth_curve(raw, kernel=DEFAULT_KERNEL) -> np.ndarray:
    """Centred discrete convolution; weights falling off the ends are renormalised away."""
    raw = np.asarray(raw, dtype=float)
    k = np.asarray(kernel, dtype=float)
    if k.ndim != 1 or k.size % 2 == 0:
        raise ValueError("kernel must be a 1-D array of odd length")
    if np.any(k < 0) or not math.isclose(k.sum(), 1.0, abs_tol=1e-12):
        raise ValueError("kernel weights must be nonnegative and sum to 1")
    c = k.size // 2
    n = raw.size
    out = np.empty(n)
    for i in range(n):
        lo, hi = max(0, i - c), min(n, i + c + 1)
        w = k[lo - i + c: hi - i + c]
        total = w.sum()
        out[i] = np.dot(w, raw[lo:hi]) / total if total > 0 else raw[i]
    return out


def shrink_expiry(smoothed, T_rem, T0: float, mu: float):
    """kappa_sm / (1 + mu (1 - w)) with w = clamp(T_rem / T0, 0, 1)."""
    check_positive("T0", T0)
    check_positive("mu", mu, strict=False)
    w = np.clip(np.asarray(T_rem, dtype=float) / T0, 0.0, 1.0)
    out = np.asarray(smoothed, dtype=float) / (1.0 + mu * (1.0 - w))
    return out[()] if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class KappaCurve:
    maturities: np.ndarray
    kappa_raw: np.ndarray
    kappa_smoothed: np.ndarray
    kappa_eff: np.ndarray
    mu_shrink: float
    T0_ref: float
    bump_eps: float
    bump_masses: tuple[float, float, float]
    index_response: float = float("nan")

    def __post_init__(self):
        for name in ("kappa_raw", "kappa_smoothed", "kappa_eff"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "maturities", check_increasing("maturities", self.maturities))

    def __call__(self, T_rem):
        """kappa_eff interpolated linearly in T_rem, pinned to 0 at expiry."""
        x = np.concatenate([[0.0], self.maturities])
        y = np.concatenate([[0.0], self.kappa_eff])
        out = np.interp(np.asarray(T_rem, dtype=float), x, y)
        return out[()] if np.ndim(out) == 0 else out

    def to_rows(self) -> list[dict]:
        return [{"T_rem": float(t), "raw": float(a), "smoothed": float(b), "eff": float(c)}
                for t, a, b, c in zip(self.maturities, self.kappa_raw, self.kappa_smoothed, self.kappa_eff)]


def build_kappa_curve(source, context: VixContext, maturities, *, eps: float = DEFAULT_EPS,
                      masses=DEFAULT_MASSES, kernel=DEFAULT_KERNEL, mu: float = 1.0,
                      T0: float = 60.0 / 365.0, level: str = "variance",
                      retained=None) -> KappaCurve:
    mats = check_increasing("maturities", maturities)
    if retained is None:
        retained = context.retained(source)
    d_index = index_bump_response(source, context, eps, masses[1:], retained, level)
    raw = np.array([bump_and_invert(source, context, t, eps, masses, retained=retained,
                                    level=level, d_index=d_index) for t in mats])
    sm = smooth_curve(raw, kernel)
    eff = shrink_expiry(sm, mats, T0, mu)
    return KappaCurve(mats, raw, sm, np.atleast_1d(eff), mu, T0, eps, tuple(masses), d_index)


class KappaMapEstimator(BaseEstimator):
    """``fit`` on a vol source and an index context; ``predict`` kappa_eff(T_rem)."""

    def __init__(self, eps: float = DEFAULT_EPS, masses=DEFAULT_MASSES, kernel=DEFAULT_KERNEL,
                 mu_shrink: float = 1.0, T0: float = 60.0 / 365.0, level: str = "variance"):
        self.eps = eps
        self.masses = masses
        self.kernel = kernel
        self.mu_shrink = mu_shrink
        self.T0 = T0
        self.level = level

    def fit(self, X, y=None, *, context: VixContext, maturities):
        self.curve_ = build_kappa_curve(X, context, maturities, eps=self.eps, masses=self.masses,
                                        kernel=self.kernel, mu=self.mu_shrink, T0=self.T0,
                                        level=self.level)
        return self

    def predict(self, T_rem):
        check_is_fitted(self, "curve_")
        return self.curve_(T_rem)
