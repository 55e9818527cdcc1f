"""Clipped Dupire local variance on a (K, T) call-price tensor.

    sigma_loc^2 = [dC/dT + (r - q) K dC/dK + q C] / [K^2/2 * max(d2C/dK2, chi)]

First derivatives use three-point Lagrange stencils (second order on any mesh,
the plain centred difference on a uniform one); the strike curvature uses the
divided-difference form 2/(K+ - K-) * (slope+ - slope-).  Boundary nodes use
one-sided stencils of matching order.

The maturity derivative is taken in u = sqrt(T) by default (dC/dT = dC/du / 2u):
near-ATM prices grow like sqrt(T), so the three-point stencil is far more
accurate on short, irregular maturity grids.  ``time_coordinate="linear"``
differences in T directly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import InsufficientGridError, check_increasing, check_positive
from .blackscholes import bs_price

logger = logging.getLogger(__name__)

DEFAULT_CHI_FLOOR = 1e-7


def fd_weights(nodes, x0: float, order: int) -> np.ndarray:
    """Weights w with sum_j w_j f(nodes_j) ~ f^(order)(x0), exact on polynomials of degree < len(nodes)."""
    d = np.asarray(nodes, dtype=float) - x0
    n = d.size
    if order >= n:
        raise InsufficientGridError(f"derivative order {order} needs more than {n} nodes")
    scale = np.max(np.abs(d))
    u = d / scale
    V = np.vander(u, n, increasing=True).T
    rhs = np.zeros(n)
    rhs[order] = float(np.prod(np.arange(1, order + 1)))
    return np.linalg.solve(V, rhs) / scale ** order


def _first_derivative(values: np.ndarray, x: np.ndarray, axis: int) -> np.ndarray:
    v = np.moveaxis(values, axis, 0)
    out = np.empty_like(v)
    n = x.size
    for i in range(n):
        idx = [0, 1, 2] if i == 0 else ([n - 3, n - 2, n - 1] if i == n - 1 else [i - 1, i, i + 1])
        w = fd_weights(x[idx], x[i], 1)
        out[i] = np.tensordot(w, v[idx], axes=1)
    return np.moveaxis(out, 0, axis)


def _second_derivative_k(values: np.ndarray, K: np.ndarray) -> np.ndarray:
    """Strike curvature along axis 0."""
    out = np.empty_like(values)
    hm = K[1:-1] - K[:-2]
    hp = K[2:] - K[1:-1]
    slope_p = (values[2:] - values[1:-1]) / hp[:, None]
    slope_m = (values[1:-1] - values[:-2]) / hm[:, None]
    out[1:-1] = 2.0 / (hp + hm)[:, None] * (slope_p - slope_m)
    n = K.size
    if n >= 4:
        out[0] = np.tensordot(fd_weights(K[:4], K[0], 2), values[:4], axes=1)
        out[-1] = np.tensordot(fd_weights(K[-4:], K[-1], 2), values[-4:], axes=1)
    else:
        out[0], out[-1] = out[1], out[-2]
    return out


@dataclass(frozen=True, eq=False)
class CallPriceGrid:
    strikes: np.ndarray
    maturities: np.ndarray
    prices: np.ndarray  # shape (n_K, n_T)
    rate_r: float
    div_q: float
    spot_S0: float

    def __post_init__(self):
        K = check_increasing("strikes", self.strikes)
        T = check_increasing("maturities", self.maturities)
        C = np.asarray(self.prices, dtype=float)
        if C.shape != (K.size, T.size):
            raise ValueError(f"prices must have shape {(K.size, T.size)}, got {C.shape}")
        if np.any(C < 0) or not np.all(np.isfinite(C)):
            raise ValueError("call prices must be finite and nonnegative")
        check_positive("spot_S0", self.spot_S0)
        object.__setattr__(self, "strikes", K)
        object.__setattr__(self, "maturities", T)
        object.__setattr__(self, "prices", C)

    def convexity_report(self, tol: float = 1e-10) -> int:
        """Count interior nodes whose discrete strike curvature is below -tol."""
        curv = _second_derivative_k(self.prices, self.strikes)[1:-1]
        return int(np.sum(curv < -tol))


def call_price_grid(source, strikes, maturities, *, extrapolate: bool = False) -> CallPriceGrid:
    """Price calls on a tensor grid off an implied-vol source."""
    K = check_increasing("strikes", strikes)
    T = check_increasing("maturities", maturities)
    C = np.empty((K.size, T.size))
    for j, t in enumerate(T):
        sig = source.implied_vol_at_strike(K, t, extrapolate=extrapolate)
        C[:, j] = np.maximum(bs_price(source.spot_S0, K, t, source.rate_r, source.div_q, sig), 0.0)
    return CallPriceGrid(K, T, C, source.rate_r, source.div_q, source.spot_S0)


@dataclass(frozen=True, eq=False)
class Partials:
    dT: np.ndarray
    dK: np.ndarray
    dKK: np.ndarray


def _maturity_derivative(C: np.ndarray, T: np.ndarray, time_coordinate: str) -> np.ndarray:
    if time_coordinate == "linear":
        return _first_derivative(C, T, axis=1)
    if time_coordinate == "sqrt":
        u = np.sqrt(T)
        return _first_derivative(C, u, axis=1) / (2.0 * u)
    raise ValueError(f"unknown time_coordinate {time_coordinate!r}")


def all_partials(grid: CallPriceGrid, time_coordinate: str = "sqrt") -> Partials:
    K, T, C = grid.strikes, grid.maturities, grid.prices
    if K.size < 3 or T.size < 3:
        raise InsufficientGridError("need at least 3 strikes and 3 maturities")
    return Partials(
        dT=_maturity_derivative(C, T, time_coordinate),
        dK=_first_derivative(C, K, axis=0),
        dKK=_second_derivative_k(C, K),
    )


def fd_partials(grid: CallPriceGrid, i: int, j: int,
                time_coordinate: str = "sqrt") -> tuple[float, float, float]:
    """(dC/dT, dC/dK, d2C/dK2) at node (K_i, T_j)."""
    p = all_partials(grid, time_coordinate)
    return float(p.dT[i, j]), float(p.dK[i, j]), float(p.dKK[i, j])


@dataclass(frozen=True, eq=False)
class LocalVolGrid:
    strikes: np.ndarray
    maturities: np.ndarray
    nodes: np.ndarray  # local variance, shape (n_K, n_T)
    clip_floor_chi: float
    clip_mask: np.ndarray
    numerator_floored: np.ndarray = field(default=None)
    C_max: float = float("nan")

    @property
    def vol(self) -> np.ndarray:
        return np.sqrt(self.nodes)

    def __call__(self, S, t):
        return interp_local_vol(self, S, t)

    def to_rows(self) -> list[dict]:
        rows = []
        for i, K in enumerate(self.strikes):
            for j, T in enumerate(self.maturities):
                rows.append({"K": float(K), "T": float(T), "sigma_loc": float(np.sqrt(self.nodes[i, j])),
                             "clipped": bool(self.clip_mask[i, j])})
        return rows


def dupire_local_variance(grid: CallPriceGrid, chi_floor: float = DEFAULT_CHI_FLOOR,
                          time_coordinate: str = "sqrt") -> LocalVolGrid:
    check_positive("chi_floor", chi_floor)
    p = all_partials(grid, time_coordinate)
    K = grid.strikes[:, None]
    r, q = grid.rate_r, grid.div_q
    numer = p.dT + (r - q) * K * p.dK + q * grid.prices
    floored = numer < 0.0
    if np.any(floored):
        logger.info("Dupire numerator floored at %d nodes", int(floored.sum()))
    numer = np.maximum(numer, 0.0)
    clip = p.dKK < chi_floor
    denom = 0.5 * K ** 2 * np.maximum(p.dKK, chi_floor)
    var = numer / denom
    return LocalVolGrid(grid.strikes, grid.maturities, var, chi_floor, clip, floored,
                        float(np.max(var)))


def _bracket(x: np.ndarray, q):
    q = np.clip(q, x[0], x[-1])
    i = np.clip(np.searchsorted(x, q, side="right") - 1, 0, x.size - 2)
    span = x[i + 1] - x[i]
    return i, (q - x[i]) / span


def interp_local_vol(lv: LocalVolGrid, S, t):
    """Bilinear interpolation of sigma_loc (vol, not variance), clamped at the edges."""
    S = np.asarray(S, dtype=float)
    vol = lv.vol
    K, T = lv.strikes, lv.maturities
    i, a = _bracket(K, S)
    if T.size == 1:
        out = (1 - a) * vol[i, 0] + a * vol[i + 1, 0]
    else:
        j, b = _bracket(T, np.asarray(t, dtype=float))
        out = ((1 - a) * (1 - b) * vol[i, j] + a * (1 - b) * vol[i + 1, j]
               + (1 - a) * b * vol[i, j + 1] + a * b * vol[i + 1, j + 1])
    return out[()] if np.ndim(out) == 0 else out


class DupireLocalVol(BaseEstimator):
    """Estimator wrapper: ``fit`` on a CallPriceGrid, ``predict`` sigma_loc(S, t)."""

    def __init__(self, chi_floor: float = DEFAULT_CHI_FLOOR, time_coordinate: str = "sqrt"):
        self.chi_floor = chi_floor
        self.time_coordinate = time_coordinate

    def fit(self, X: CallPriceGrid, y=None):
        if not isinstance(X, CallPriceGrid):
            raise TypeError("DupireLocalVol.fit expects a CallPriceGrid")
        self.grid_ = dupire_local_variance(X, self.chi_floor, self.time_coordinate)
        self.n_clipped_ = int(self.grid_.clip_mask.sum())
        return self

    def predict(self, S, t):
        check_is_fitted(self, "grid_")
        return interp_local_vol(self.grid_, S, t)
