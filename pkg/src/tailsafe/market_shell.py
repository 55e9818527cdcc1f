"""SSVI total-variance surface, static no-arbitrage checks and the ATM-jet teacher.

Total variance on a slice is

    w(k; T) = theta/2 * (1 + rho*phi*k + sqrt((phi*k + rho)**2 + 1 - rho**2))

with k = log(K / F(T)).  Between calibrated maturities the surface interpolates
w linearly in T at fixed k, which keeps nonnegative calendar increments intact.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from ._validation import DomainError, check_in_range, check_positive

logger = logging.getLogger(__name__)

DEFAULT_K_CORRIDOR = (-0.357, 0.262)
DEFAULT_VOL_FLOOR = 1e-4


class CalendarAdjustmentError(ValueError):
    """The monotone post-adjustment produced a slice that fails re-validation."""


@dataclass(frozen=True)
class SsviSlice:
    maturity_T: float
    theta: float
    rho_skew: float
    phi_wing: float

    def __post_init__(self):
        check_positive("maturity_T", self.maturity_T)
        check_positive("theta", self.theta)
        check_in_range("rho_skew", self.rho_skew, -1.0, 1.0, closed=False)
        check_positive("phi_wing", self.phi_wing, strict=False)

    @property
    def g1(self) -> float:
        return 4.0 - self.phi_wing * self.theta

    @property
    def g2(self) -> float:
        return 4.0 * (1.0 - self.rho_skew ** 2) - self.phi_wing ** 2 * self.theta

    @property
    def butterfly_ok(self) -> bool:
        return self.g1 >= 0.0 and self.g2 >= 0.0

    def total_variance(self, k):
        k = np.asarray(k, dtype=float)
        pk = self.phi_wing * k
        rho = self.rho_skew
        w = 0.5 * self.theta * (1.0 + rho * pk + np.sqrt((pk + rho) ** 2 + 1.0 - rho * rho))
        return w[()] if w.ndim == 0 else w


@dataclass(frozen=True)
class AtmJet:
    level_L: float
    slope_S: float
    curvature_C: float
    fd_step_h: float

    def __post_init__(self):
        check_positive("fd_step_h", self.fd_step_h)
        check_positive("level_L", self.level_L)


@dataclass(frozen=True)
class BasisTerm:
    """A smile correction psi(k, T) re-centred so its 2-jet at k = 0 vanishes.

    The raw value, slope and curvature at k = 0 are taken with the same centred
    stencils used by ``extract_atm_jet``, so the stored term reproduces a zero jet
    under those stencils up to rounding.
    """

    raw: Callable[[np.ndarray, float], np.ndarray]
    name: str = "psi"
    h: float = 1e-3
    recenter: bool = True

    def _raw_jet(self, T: float):
        h = self.h
        f = np.asarray(self.raw(np.array([-h, 0.0, h]), T), dtype=float)
        return f[1], (f[2] - f[0]) / (2 * h), (f[2] - 2 * f[1] + f[0]) / (h * h)

    def __call__(self, k, T: float):
        k = np.asarray(k, dtype=float)
        if not self.recenter:
            out = np.asarray(self.raw(k, T), dtype=float)
            return out[()] if out.ndim == 0 else out
        v0, d1, d2 = self._raw_jet(T)
        out = np.asarray(self.raw(k, T), dtype=float) - v0 - d1 * k - 0.5 * d2 * k * k
        return out[()] if out.ndim == 0 else out


def power_basis(p: int) -> BasisTerm:
    """k**p for p >= 3; its 2-jet at the money is already zero, so no re-centring."""
    if p < 3:
        raise ValueError(f"power basis needs p >= 3 to be jet-orthogonal, got {p}")
    return BasisTerm(raw=lambda k, T, p=p: np.asarray(k, dtype=float) ** p, name=f"k^{p}", recenter=False)


@dataclass(frozen=True)
class AslClosure:
    """Jet-preserving teacher smile on one maturity."""

    jet: AtmJet
    aux_coeffs: tuple[float, ...] = ()
    aux_basis: tuple[BasisTerm, ...] = ()
    vol_floor: float = DEFAULT_VOL_FLOOR

    def __post_init__(self):
        if len(self.aux_coeffs) != len(self.aux_basis):
            raise ValueError("aux_coeffs and aux_basis must have equal length")
        check_positive("vol_floor", self.vol_floor)


def teacher_vol(closure: AslClosure, k, T: float, *, return_flags: bool = False):
    """sigma_hat = L + S k + C k^2 / 2 + sum_j alpha_j psi_j(k, T), clamped at the floor."""
    k = np.asarray(k, dtype=float)
    jet = closure.jet
    sig = jet.level_L + jet.slope_S * k + 0.5 * jet.curvature_C * k * k
    for a, psi in zip(closure.aux_coeffs, closure.aux_basis):
        sig = sig + a * np.asarray(psi(k, T), dtype=float)
    clamped = sig < closure.vol_floor
    if np.any(clamped):
        logger.debug("teacher vol clamped at %d points", int(np.sum(clamped)))
    sig = np.where(clamped, closure.vol_floor, sig)
    sig = sig[()] if sig.ndim == 0 else sig
    if return_flags:
        return sig, clamped
    return sig


def _interp_weights(maturities: np.ndarray, T: float):
    j = int(np.searchsorted(maturities, T, side="right")) - 1
    j = min(max(j, 0), maturities.size - 2) if maturities.size > 1 else 0
    if maturities.size == 1:
        return 0, 0, 1.0
    Ta, Tb = maturities[j], maturities[j + 1]
    lam = (T - Ta) / (Tb - Ta)
    return j, j + 1, float(lam)


class _TotalVarianceSource:
    """Shared pricing helpers for anything exposing node total variance."""

    spot_S0: float
    rate_r: float
    div_q: float
    k_corridor: tuple[float, float]

    @property
    def maturities(self) -> np.ndarray:  # pragma: no cover - overridden
        raise NotImplementedError

    def _node_total_variance(self, j: int, k):  # pragma: no cover - overridden
        raise NotImplementedError

    def forward(self, T):
        return self.spot_S0 * np.exp((self.rate_r - self.div_q) * np.asarray(T, dtype=float))

    def total_variance(self, k, T: float, *, extrapolate: bool = False):
        mats = self.maturities
        T = float(T)
        lo, hi = mats[0], mats[-1]
        tol = 1e-12 * hi
        if T < lo - tol or T > hi + tol:
            if not extrapolate:
                raise DomainError(f"T={T} outside calibrated range [{lo}, {hi}]")
            # constant implied vol beyond the calibrated maturities
            edge = 0 if T < lo else mats.size - 1
            return np.asarray(self._node_total_variance(edge, k)) * (T / mats[edge])
        ja, jb, lam = _interp_weights(mats, min(max(T, lo), hi))
        wa = np.asarray(self._node_total_variance(ja, k), dtype=float)
        if lam == 0.0 or ja == jb:
            return wa
        wb = np.asarray(self._node_total_variance(jb, k), dtype=float)
        return (1.0 - lam) * wa + lam * wb

    def implied_vol(self, k, T: float, *, extrapolate: bool = False):
        w = self.total_variance(k, T, extrapolate=extrapolate)
        out = np.sqrt(np.maximum(w, 0.0) / float(T))
        return out[()] if np.ndim(out) == 0 else out

    def implied_vol_at_strike(self, K, T: float, *, extrapolate: bool = False):
        k = np.log(np.asarray(K, dtype=float) / self.forward(T))
        return self.implied_vol(k, T, extrapolate=extrapolate)


@dataclass(frozen=True)
class VolSurface(_TotalVarianceSource):
    slices: tuple[SsviSlice, ...]
    spot_S0: float
    rate_r: float = 0.0
    div_q: float = 0.0
    teacher: tuple[AslClosure, ...] | None = None
    k_corridor: tuple[float, float] = DEFAULT_K_CORRIDOR

    def __post_init__(self):
        object.__setattr__(self, "slices", tuple(self.slices))
        if not self.slices:
            raise ValueError("surface needs at least one slice")
        mats = np.array([s.maturity_T for s in self.slices])
        if np.any(np.diff(mats) <= 0):
            raise ValueError("slice maturities must be strictly increasing")
        check_positive("spot_S0", self.spot_S0)
        lo, hi = self.k_corridor
        if not lo < 0.0 < hi:
            raise ValueError(f"k corridor must bracket 0, got {self.k_corridor}")
        if self.teacher is not None:
            object.__setattr__(self, "teacher", tuple(self.teacher))
            if len(self.teacher) != len(self.slices):
                raise ValueError("teacher needs one closure per slice")

    @property
    def maturities(self) -> np.ndarray:
        return np.array([s.maturity_T for s in self.slices])

    def _node_total_variance(self, j, k):
        return self.slices[j].total_variance(k)

    def teacher_surface(self) -> "TeacherSurface":
        if self.teacher is None:
            raise ValueError("surface has no teacher closure attached")
        return TeacherSurface(self.teacher, self.maturities, self.spot_S0, self.rate_r,
                              self.div_q, self.k_corridor)


@dataclass(frozen=True)
class TeacherSurface(_TotalVarianceSource):
    """Teacher closures on the surface maturities, interpolated like the surface."""

    closures: tuple[AslClosure, ...]
    node_maturities: np.ndarray
    spot_S0: float
    rate_r: float = 0.0
    div_q: float = 0.0
    k_corridor: tuple[float, float] = DEFAULT_K_CORRIDOR

    @property
    def maturities(self) -> np.ndarray:
        return np.asarray(self.node_maturities, dtype=float)

    def _node_total_variance(self, j, k):
        T = float(self.maturities[j])
        sig = teacher_vol(self.closures[j], k, T)
        return np.asarray(sig) ** 2 * T


@dataclass(frozen=True)
class FlatVolSource(_TotalVarianceSource):
    """Constant implied volatility; defined for every T > 0."""

    sigma: float
    spot_S0: float
    rate_r: float = 0.0
    div_q: float = 0.0
    k_corridor: tuple[float, float] = DEFAULT_K_CORRIDOR

    @property
    def maturities(self) -> np.ndarray:
        return np.array([1e-12, 1e6])

    def total_variance(self, k, T: float, *, extrapolate: bool = False):
        return np.full_like(np.asarray(k, dtype=float), self.sigma ** 2 * float(T))


def eval_total_variance(surface: VolSurface, k, T: float):
    """Total variance w(k; T) on calibrated maturities, linear in T in between."""
    return surface.total_variance(k, T)


@dataclass
class NoArbReport:
    g1: list[float]
    g2: list[float]
    calendar_violations: list[tuple[float, float, float]] = field(default_factory=list)
    teacher_clamped: int = 0

    @property
    def butterfly_ok(self) -> bool:
        return all(a >= 0.0 for a in self.g1) and all(b >= 0.0 for b in self.g2)

    @property
    def calendar_ok(self) -> bool:
        return not self.calendar_violations

    @property
    def ok(self) -> bool:
        return self.butterfly_ok and self.calendar_ok

    def to_text(self) -> str:
        lines = [f"slice {i}: g1={a:.6g} g2={b:.6g}" for i, (a, b) in enumerate(zip(self.g1, self.g2))]
        lines.append(f"calendar_violations={len(self.calendar_violations)}")
        lines.append(f"teacher_clamped={self.teacher_clamped}")
        lines.append(f"status={'pass' if self.ok else 'fail'}")
        return "\n".join(lines)


def corridor_grid(corridor=DEFAULT_K_CORRIDOR, n: int = 121) -> np.ndarray:
    return np.linspace(corridor[0], corridor[1], n)


def validate_no_arbitrage(surface: VolSurface, n_k: int = 121, tol: float = 1e-14) -> NoArbReport:
    report = NoArbReport(g1=[s.g1 for s in surface.slices], g2=[s.g2 for s in surface.slices])
    ks = corridor_grid(surface.k_corridor, n_k)
    for a, b in zip(surface.slices[:-1], surface.slices[1:]):
        wa, wb = a.total_variance(ks), b.total_variance(ks)
        bad = wa > wb + tol
        report.calendar_violations.extend(
            (float(k), a.maturity_T, b.maturity_T) for k in ks[bad]
        )
    if surface.teacher is not None:
        for closure, s in zip(surface.teacher, surface.slices):
            _, flags = teacher_vol(closure, ks, s.maturity_T, return_flags=True)
            report.teacher_clamped += int(np.sum(flags))
    return report


def enforce_calendar_monotone(surface: VolSurface, n_k: int = 121) -> VolSurface:
    """Replace theta(T) by its running maximum and re-validate every slice."""
    new_slices = []
    running = -np.inf
    for s in surface.slices:
        running = max(running, s.theta)
        new_slices.append(s if running == s.theta else replace(s, theta=running))
    for i, (old, new) in enumerate(zip(surface.slices, new_slices)):
        if new is not old and not new.butterfly_ok:
            raise CalendarAdjustmentError(
                f"slice {i} (T={new.maturity_T:g}) fails butterfly after raising theta to "
                f"{new.theta:g}: g1={new.g1:.6g}, g2={new.g2:.6g}"
            )
    adjusted = replace(surface, slices=tuple(new_slices))
    report = validate_no_arbitrage(adjusted, n_k=n_k)
    if not report.calendar_ok:
        k, Ta, Tb = report.calendar_violations[0]
        raise CalendarAdjustmentError(
            f"calendar still violated between T={Ta:g} and T={Tb:g} at k={k:.4f}"
        )
    return adjusted


def extract_atm_jet(surface: _TotalVarianceSource, T: float, h: float = 0.01) -> AtmJet:
    """Level, slope and curvature of sigma(k) at k = 0 by centred differences."""
    check_positive("h", h)
    lo, hi = surface.k_corridor
    if 3 * h > min(-lo, hi):
        raise DomainError(f"3h={3 * h} exceeds the k corridor {surface.k_corridor}")
    s_m, s_0, s_p = np.asarray(surface.implied_vol(np.array([-h, 0.0, h]), T), dtype=float)
    return AtmJet(
        level_L=float(s_0),
        slope_S=float((s_p - s_m) / (2 * h)),
        curvature_C=float((s_p - 2 * s_0 + s_m) / (h * h)),
        fd_step_h=h,
    )


def attach_teacher(surface: VolSurface, h: float = 0.01,
                   basis: Sequence[BasisTerm] = (), coeffs: Sequence[Sequence[float]] | None = None,
                   vol_floor: float = DEFAULT_VOL_FLOOR) -> VolSurface:
    """Build one jet closure per slice (optionally with auxiliary terms) and attach it."""
    basis = tuple(basis)
    closures = []
    for j, s in enumerate(surface.slices):
        alphas = tuple(coeffs[j]) if coeffs is not None else tuple(0.0 for _ in basis)
        jet = extract_atm_jet(surface, s.maturity_T, h)
        closures.append(AslClosure(jet=jet, aux_coeffs=alphas, aux_basis=basis, vol_floor=vol_floor))
    return replace(surface, teacher=tuple(closures))
