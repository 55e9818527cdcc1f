"""Cboe-style model-free variance estimator and 30-day index interpolation.

Per maturity

    sigma^2(T) = 2/T * sum_i dK_i / K_i^2 * e^{rT} Q(K_i) - 1/T * (F/K0 - 1)^2

with Q the OTM aggregator (puts below K0, calls above, put/call mean at K0) and dK_i
the half-interval weights.  Two bracketing maturities are blended affinely in
total variance on a minute clock and annualised to 30 calendar days.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ._validation import InsufficientGridError, check_increasing, check_positive
from .blackscholes import bs_price

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6
MINUTES_PER_DAY = 1440
MINUTES_30D = 30 * MINUTES_PER_DAY
MINUTES_PER_YEAR = 365 * MINUTES_PER_DAY


class BracketError(ValueError):
    """The two maturities do not bracket the 30-day target."""


class GridMismatchError(ValueError):
    """Two pricing pipelines were asked to compare different retained grids."""


@dataclass(frozen=True)
class OptionQuote:
    strike_K: float
    bid: float
    mid_price: float
    is_call: bool

    def __post_init__(self):
        check_positive("strike_K", self.strike_K)
        if self.bid < 0 or self.mid_price < 0:
            raise ValueError("bid and mid_price must be nonnegative")


@dataclass(frozen=True, eq=False)
class OptionGrid:
    """Put and call quotes on one expiry, stored column-wise."""

    maturity_T: float
    forward_F: float
    strikes: np.ndarray
    call_mid: np.ndarray
    put_mid: np.ndarray
    call_bid: np.ndarray
    put_bid: np.ndarray
    rate_r: float = 0.0
    K0: float | None = None

    def __post_init__(self):
        check_positive("maturity_T", self.maturity_T)
        check_positive("forward_F", self.forward_F)
        strikes = check_increasing("strikes", self.strikes, min_len=1)
        if np.any(strikes <= 0):
            raise ValueError("strikes must be positive")
        cols = {}
        for name in ("call_mid", "put_mid", "call_bid", "put_bid"):
            col = np.asarray(getattr(self, name), dtype=float)
            if col.shape != strikes.shape:
                raise ValueError(f"{name} must align with strikes")
            if np.any(col < 0) or not np.all(np.isfinite(col)):
                raise ValueError(f"{name} must be finite and nonnegative")
            cols[name] = col
        below = strikes[strikes <= self.forward_F]
        if self.K0 is None:
            if below.size == 0:
                raise InsufficientGridError("no strike at or below the forward; K0 undefined")
            k0 = float(below[-1])
        else:
            k0 = float(self.K0)
            if k0 > self.forward_F or not np.any(np.isclose(strikes, k0, rtol=0, atol=1e-12)):
                raise ValueError("K0 must be a listed strike not above the forward")
        object.__setattr__(self, "strikes", strikes)
        for name, col in cols.items():
            object.__setattr__(self, name, col)
        object.__setattr__(self, "K0", k0)

    @property
    def k0_index(self) -> int:
        return int(np.searchsorted(self.strikes, self.K0))

    @property
    def quotes(self) -> list[OptionQuote]:
        out = []
        for i, K in enumerate(self.strikes):
            out.append(OptionQuote(float(K), float(self.put_bid[i]), float(self.put_mid[i]), False))
            out.append(OptionQuote(float(K), float(self.call_bid[i]), float(self.call_mid[i]), True))
        return out

    @classmethod
    def from_quotes(cls, quotes, maturity_T: float, forward_F: float, rate_r: float = 0.0,
                    K0: float | None = None) -> "OptionGrid":
        calls = {q.strike_K: q for q in quotes if q.is_call}
        puts = {q.strike_K: q for q in quotes if not q.is_call}
        if set(calls) != set(puts):
            raise ValueError("every strike needs exactly one put and one call")
        ks = sorted(calls)
        return cls(
            maturity_T=maturity_T, forward_F=forward_F, strikes=np.array(ks),
            call_mid=np.array([calls[k].mid_price for k in ks]),
            put_mid=np.array([puts[k].mid_price for k in ks]),
            call_bid=np.array([calls[k].bid for k in ks]),
            put_bid=np.array([puts[k].bid for k in ks]),
            rate_r=rate_r, K0=K0,
        )

    def otm_prices(self) -> np.ndarray:
        """Q(K): puts below K0, calls above, the put/call mean at K0."""
        K = self.strikes
        q = np.where(K < self.K0, self.put_mid, self.call_mid)
        i0 = self.k0_index
        q = q.copy()
        q[i0] = 0.5 * (self.put_mid[i0] + self.call_mid[i0])
        return q

    def restrict(self, strikes) -> "OptionGrid":
        """Sub-grid on a subset of listed strikes, keeping K0."""
        idx = np.searchsorted(self.strikes, np.asarray(strikes, dtype=float))
        return OptionGrid(self.maturity_T, self.forward_F, self.strikes[idx], self.call_mid[idx],
                          self.put_mid[idx], self.call_bid[idx], self.put_bid[idx],
                          self.rate_r, self.K0)


def build_option_grid(source, T: float, strikes, half_spread: float = 0.0,
                      *, extrapolate: bool = False) -> OptionGrid:
    """Price puts and calls off an implied-vol source and attach synthetic bids.

    ``source`` is anything with ``forward``, ``implied_vol_at_strike``, ``spot_S0``,
    ``rate_r`` and ``div_q`` (a surface, its teacher, or a flat-vol world).
    """
    strikes = check_increasing("strikes", strikes, min_len=1)
    F = float(source.forward(T))
    sig = np.asarray(source.implied_vol_at_strike(strikes, T, extrapolate=extrapolate), dtype=float)
    args = (source.spot_S0, strikes, T, source.rate_r, source.div_q, sig)
    call = np.maximum(bs_price(*args, is_call=True), 0.0)
    put = np.maximum(bs_price(*args, is_call=False), 0.0)
    return OptionGrid(
        maturity_T=T, forward_F=F, strikes=strikes, call_mid=call, put_mid=put,
        call_bid=np.maximum(call - half_spread, 0.0), put_bid=np.maximum(put - half_spread, 0.0),
        rate_r=source.rate_r,
    )


def _walk_wing(bids: np.ndarray) -> int:
    """Number of strikes kept when walking outward over ``bids``."""
    for j in range(bids.size - 1):
        if bids[j] == 0.0 and bids[j + 1] == 0.0:
            return j
    return bids.size


def prune_wings(grid: OptionGrid) -> np.ndarray:
    """Strikes kept after the two-consecutive-zero-bid rule on each wing.

    An isolated zero bid is kept and the walk continues; a pair of zero bids drops
    the pair and everything farther out.
    """
    i0 = grid.k0_index
    put_side = grid.put_bid[:i0][::-1]
    call_side = grid.call_bid[i0 + 1:]
    n_put = _walk_wing(put_side)
    n_call = _walk_wing(call_side)
    return grid.strikes[i0 - n_put: i0 + 1 + n_call].copy()


def half_interval_weights(strikes) -> np.ndarray:
    K = check_increasing("strikes", strikes)
    if K.size < 2:
        raise InsufficientGridError("half-interval weights need at least 2 strikes")
    w = np.empty_like(K)
    w[0] = K[1] - K[0]
    w[-1] = K[-1] - K[-2]
    w[1:-1] = 0.5 * (K[2:] - K[:-2])
    return w


@dataclass
class VarianceBreakdown:
    maturity_T: float
    forward_F: float
    K0: float
    variance: float
    strikes: np.ndarray
    weights: np.ndarray
    otm_prices: np.ndarray
    contributions: np.ndarray
    correction: float

    def to_rows(self) -> list[dict]:
        return [
            {"T": self.maturity_T, "K": float(K), "dK": float(w), "Q": float(q), "contribution": float(c)}
            for K, w, q, c in zip(self.strikes, self.weights, self.otm_prices, self.contributions)
        ]


def single_maturity_variance(grid: OptionGrid, retained=None) -> VarianceBreakdown:
    """sigma^2(T) on the retained strikes (pruned from ``grid`` when not given)."""
    if retained is None:
        retained = prune_wings(grid)
    retained = np.asarray(retained, dtype=float)
    if retained.size == 0:
        raise InsufficientGridError("empty retained strike set")
    if not np.any(np.isclose(retained, grid.K0, rtol=0, atol=1e-12)):
        raise ValueError("retained strikes must include K0")
    sub = grid.restrict(retained)
    T, r = sub.maturity_T, sub.rate_r
    weights = half_interval_weights(sub.strikes)
    Q = sub.otm_prices()
    contrib = (2.0 / T) * weights / sub.strikes ** 2 * np.exp(r * T) * Q
    correction = (sub.forward_F / sub.K0 - 1.0) ** 2 / T
    return VarianceBreakdown(T, sub.forward_F, sub.K0, float(contrib.sum() - correction),
                             sub.strikes, weights, Q, contrib, float(correction))


@dataclass
class VixResult:
    variance_T: tuple[float, float]
    weights_used: tuple[np.ndarray, np.ndarray]
    retained_strikes: tuple[np.ndarray, np.ndarray]
    vix_30: float
    w_star: float
    sigma2_30: float
    lambdas: tuple[float, float]
    floored: bool = False
    breakdowns: tuple[VarianceBreakdown, VarianceBreakdown] | None = field(default=None, repr=False)


def minute_weights(minutes1: float, minutes2: float) -> tuple[float, float]:
    if not minutes1 < MINUTES_30D <= minutes2:
        raise BracketError(
            f"maturities ({minutes1}, {minutes2}) minutes do not bracket {MINUTES_30D}"
        )
    span = minutes2 - minutes1
    return (minutes2 - MINUTES_30D) / span, (MINUTES_30D - minutes1) / span


def combine_30d(var1: float, var2: float, minutes1: float, minutes2: float,
                variance_floor: float = VARIANCE_FLOOR):
    """(w_star, sigma^2_30, vix, floored) from two single-maturity variances."""
    lam1, lam2 = minute_weights(minutes1, minutes2)
    T1, T2 = minutes1 / MINUTES_PER_YEAR, minutes2 / MINUTES_PER_YEAR
    w_star = lam1 * T1 * var1 + lam2 * T2 * var2
    s2 = w_star * 365.0 / 30.0
    floored = s2 < variance_floor
    return w_star, s2, 100.0 * np.sqrt(max(s2, variance_floor)), floored


def vix_30d(grid1: OptionGrid, grid2: OptionGrid, minutes1: float, minutes2: float,
            *, retained1=None, retained2=None,
            variance_floor: float = VARIANCE_FLOOR) -> VixResult:
    lam = minute_weights(minutes1, minutes2)
    b1 = single_maturity_variance(grid1, retained1)
    b2 = single_maturity_variance(grid2, retained2)
    w_star, s2, vix, floored = combine_30d(b1.variance, b2.variance, minutes1, minutes2,
                                           variance_floor)
    if floored:
        logger.warning("30D variance %.3g below floor %.3g; floored", s2, variance_floor)
    return VixResult(
        variance_T=(b1.variance, b2.variance), weights_used=(b1.weights, b2.weights),
        retained_strikes=(b1.strikes, b2.strikes), vix_30=float(vix), w_star=float(w_star),
        sigma2_30=float(s2), lambdas=lam, floored=bool(floored), breakdowns=(b1, b2),
    )


@dataclass(frozen=True)
class VixContext:
    """Everything needed to reprice the index off a vol source on fixed grids."""

    strikes: np.ndarray
    days1: float
    days2: float
    half_spread: float = 0.0
    variance_floor: float = VARIANCE_FLOOR

    @property
    def minutes(self) -> tuple[float, float]:
        return self.days1 * MINUTES_PER_DAY, self.days2 * MINUTES_PER_DAY

    @property
    def maturities(self) -> tuple[float, float]:
        m1, m2 = self.minutes
        return m1 / MINUTES_PER_YEAR, m2 / MINUTES_PER_YEAR

    def grids(self, source, retained=None):
        T1, T2 = self.maturities
        g1 = build_option_grid(source, T1, self.strikes, self.half_spread)
        g2 = build_option_grid(source, T2, self.strikes, self.half_spread)
        return g1, g2

    def retained(self, source) -> tuple[np.ndarray, np.ndarray]:
        g1, g2 = self.grids(source)
        return prune_wings(g1), prune_wings(g2)

    def evaluate(self, source, retained=None) -> VixResult:
        g1, g2 = self.grids(source)
        if retained is None:
            retained = (prune_wings(g1), prune_wings(g2))
        m1, m2 = self.minutes
        return vix_30d(g1, g2, m1, m2, retained1=retained[0], retained2=retained[1],
                       variance_floor=self.variance_floor)


@dataclass
class CoherenceResult:
    residual: float
    vix_a: float
    vix_b: float
    eps_shape: float
    bound: float
    bound_terms: dict
    passed: bool


def coherence_residual(surface_a, surface_b, context: VixContext, retained=None) -> CoherenceResult:
    """|VIX[a] - VIX[b]| on shared retained strikes plus the coherence bound.

    ``retained`` defaults to the pruning produced by ``surface_b`` (the shell), and
    both pipelines are then forced onto it.
    """
    from .verification import coherence_bound

    if retained is None:
        retained = context.retained(surface_b)
    retained = tuple(np.asarray(r, dtype=float) for r in retained)
    if len(retained) != 2:
        raise GridMismatchError("need one retained strike set per bracketing maturity")
    for r in retained:
        if not np.all(np.isin(r, context.strikes)):
            raise GridMismatchError("retained strikes are not a subset of the context grid")
    res_a = context.evaluate(surface_a, retained)
    res_b = context.evaluate(surface_b, retained)
    bound = coherence_bound(surface_a, surface_b, context, retained)
    residual = abs(res_a.vix_30 - res_b.vix_30)
    return CoherenceResult(
        residual=float(residual), vix_a=res_a.vix_30, vix_b=res_b.vix_30,
        eps_shape=bound["eps_shape"], bound=bound["bound"], bound_terms=bound,
        passed=bool(residual <= bound["bound"]),
    )
