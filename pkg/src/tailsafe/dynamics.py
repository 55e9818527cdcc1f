"""Spot/variance path simulation and the closed-form 30-day variance proxy.

Spot follows a log-Euler step under a local-vol function; the variance factor is
a CIR process stepped with full-truncation Euler.  Normals come from a
counter-based Philox stream keyed by (seed, path), with the draw for
(step, channel) at a fixed position, so panels do not depend on path order.
"""

from __future__ import annotations

import hashlib
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.special import ndtri

from ._validation import check_in_range, check_positive
from .vix_engine import VARIANCE_FLOOR

logger = logging.getLogger(__name__)

TAU_30D = 30.0 / 365.0
MAX_PANEL_CELLS = 200_000_000


class PanelSizeError(ValueError):
    """Requested panel would exceed the configured memory budget."""


@dataclass(frozen=True)
class CirParams:
    kappa_mr: float
    theta_lr: float
    xi_volvol: float
    rho_sv: float
    v0: float

    def __post_init__(self):
        check_positive("kappa_mr", self.kappa_mr)
        check_positive("theta_lr", self.theta_lr)
        check_positive("xi_volvol", self.xi_volvol, strict=False)
        check_in_range("rho_sv", self.rho_sv, -1.0, 1.0)
        check_positive("v0", self.v0)
        if not self.feller:
            warnings.warn(
                f"Feller condition fails: 2*kappa*theta={2 * self.kappa_mr * self.theta_lr:.4g} "
                f"< xi^2={self.xi_volvol ** 2:.4g}", RuntimeWarning, stacklevel=2,
            )

    @property
    def feller(self) -> bool:
        return 2.0 * self.kappa_mr * self.theta_lr >= self.xi_volvol ** 2

    def mean(self, t):
        """E[v_t] = theta + (v0 - theta) e^{-kappa t}."""
        return self.theta_lr + (self.v0 - self.theta_lr) * np.exp(-self.kappa_mr * np.asarray(t, dtype=float))


@dataclass(frozen=True)
class SimConfig:
    steps_per_year: int = 252
    horizon_days: float = 60
    n_paths: int = 300
    n_seeds: int = 8
    base_seed: int = 0

    def __post_init__(self):
        for name in ("steps_per_year", "n_paths", "n_seeds"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        check_positive("horizon_days", self.horizon_days)

    @property
    def dt(self) -> float:
        return 1.0 / self.steps_per_year

    @property
    def n_steps(self) -> int:
        return max(1, math.ceil(self.horizon_days / 365.0 * self.steps_per_year - 1e-9))

    @property
    def seeds(self) -> list[int]:
        return [self.base_seed + i for i in range(self.n_seeds)]


@dataclass
class PathState:
    S: np.ndarray
    v: np.ndarray
    t: float = 0.0
    truncations: int = 0
    rng_stream: object = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# random numbers
# ---------------------------------------------------------------------------

def _philox(seed: int, path: int) -> np.random.Philox:
    key = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(path)]).generate_state(2, np.uint64)
    return np.random.Philox(key=key)


def uniform_stream(seed: int, path: int, n: int) -> np.ndarray:
    """n uniforms in the open interval (0, 1) from the (seed, path) counter stream."""
    raw = _philox(seed, path).random_raw(n)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def path_normals(seed: int, path: int, n_steps: int, n_channels: int = 2) -> np.ndarray:
    """Standard normals of shape (n_steps, n_channels); entry (s, c) sits at position s*n_channels + c."""
    u = uniform_stream(seed, path, n_steps * n_channels)
    return ndtri(u).reshape(n_steps, n_channels)


def panel_normals(seed: int, paths, n_steps: int, n_channels: int = 2) -> np.ndarray:
    """Shape (n_paths, n_steps, n_channels)."""
    return np.stack([path_normals(seed, p, n_steps, n_channels) for p in paths])


def draws_digest(z: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(z, dtype=np.float64).tobytes()).hexdigest()


def correlate_draws(z1, z2, rho: float):
    check_in_range("rho", rho, -1.0, 1.0)
    z1 = np.asarray(z1, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    return z1, rho * z1 + math.sqrt(max(1.0 - rho * rho, 0.0)) * z2


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------

VolFunction = Callable[[np.ndarray, float], np.ndarray]


def step_log_euler(state: PathState, lv: VolFunction, r: float, q: float, dt: float,
                   z_spot) -> PathState:
    """S <- S exp((r - q - sigma^2/2) dt + sigma sqrt(dt) z) with sigma = lv(S, t)."""
    check_positive("dt", dt)
    S = np.asarray(state.S, dtype=float)
    sig = np.asarray(lv(S, state.t), dtype=float)
    S_new = S * np.exp((r - q - 0.5 * sig * sig) * dt + sig * math.sqrt(dt) * np.asarray(z_spot))
    return replace(state, S=S_new, t=state.t + dt)


def step_cir(state: PathState, p: CirParams, dt: float, z_var) -> PathState:
    """Full-truncation Euler: drift and diffusion see max(v, 0); result floored at 0."""
    check_positive("dt", dt)
    v = np.asarray(state.v, dtype=float)
    vp = np.maximum(v, 0.0)
    v_new = v + p.kappa_mr * (p.theta_lr - vp) * dt + p.xi_volvol * np.sqrt(vp * dt) * np.asarray(z_var)
    neg = v_new < 0.0
    n_trunc = int(np.sum(neg))
    return replace(state, v=np.maximum(v_new, 0.0), truncations=state.truncations + n_trunc)


def vix_loading(p: CirParams, tau: float = TAU_30D) -> float:
    """B = (1 - e^{-kappa tau}) / (kappa tau)."""
    x = p.kappa_mr * tau
    return float(-math.expm1(-x) / x) if x > 0 else 1.0


def vix_proxy_variance(v, p: CirParams, tau: float = TAU_30D):
    B = vix_loading(p, tau)
    return p.theta_lr + (np.asarray(v, dtype=float) - p.theta_lr) * B


def vix_proxy(v, p: CirParams, tau: float = TAU_30D, floor: float = VARIANCE_FLOOR):
    """100 sqrt(max(theta + (v - theta) B, floor))."""
    out = 100.0 * np.sqrt(np.maximum(vix_proxy_variance(v, p, tau), floor))
    return out[()] if np.ndim(out) == 0 else out


def vix_lipschitz_constant(p: CirParams, tau: float = TAU_30D) -> float:
    """50 B / sqrt(theta): the slope of the proxy at v = theta (valid for v >= theta)."""
    return 50.0 * vix_loading(p, tau) / math.sqrt(p.theta_lr)


def vix_lipschitz_sharp(p: CirParams, tau: float = TAU_30D, floor: float = VARIANCE_FLOOR) -> float:
    """Supremum of the proxy slope over v >= 0, attained at v = 0."""
    B = vix_loading(p, tau)
    return 50.0 * B / math.sqrt(max(p.theta_lr * (1.0 - B), floor))


# ---------------------------------------------------------------------------
# pools
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class PathPanel:
    seeds: list[int]
    S: np.ndarray  # (n_seeds, n_paths, n_steps + 1)
    v: np.ndarray
    vix: np.ndarray
    times: np.ndarray
    truncations: int
    draws_sha256: str

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.S.shape

    def to_rows(self):
        n_seeds, n_paths, n_t = self.S.shape
        for a in range(n_seeds):
            for b in range(n_paths):
                for c in range(n_t):
                    yield {"seed": self.seeds[a], "path": b, "step": c, "S": float(self.S[a, b, c]),
                           "v": float(self.v[a, b, c]), "VIX": float(self.vix[a, b, c])}


def simulate_paths(lv: VolFunction, cir: CirParams, r: float, q: float, S0: float,
                   z: np.ndarray, dt: float):
    """Simulate all paths from pre-drawn independent normals z of shape (n_paths, n_steps, 2)."""
    n_paths, n_steps, _ = z.shape
    S = np.empty((n_paths, n_steps + 1))
    v = np.empty((n_paths, n_steps + 1))
    state = PathState(S=np.full(n_paths, float(S0)), v=np.full(n_paths, cir.v0))
    S[:, 0], v[:, 0] = state.S, state.v
    for n in range(n_steps):
        z_spot, z_var = correlate_draws(z[:, n, 0], z[:, n, 1], cir.rho_sv)
        t_now = state.t
        spot = step_log_euler(state, lv, r, q, dt, z_spot)
        state = step_cir(replace(spot, t=t_now), cir, dt, z_var)
        state.t = t_now + dt
        S[:, n + 1], v[:, n + 1] = state.S, state.v
    return S, v, state.truncations


def simulate_pool(cfg: SimConfig, lv: VolFunction, cir: CirParams, r: float, q: float,
                  S0: float, *, zero_shocks: bool = False,
                  max_cells: int = MAX_PANEL_CELLS) -> PathPanel:
    """Panel of (S, v, VIX) with shape n_seeds x n_paths x (n_steps + 1)."""
    n_steps = cfg.n_steps
    cells = cfg.n_seeds * cfg.n_paths * (n_steps + 1)
    if cells > max_cells:
        raise PanelSizeError(f"panel of {cells} cells exceeds the limit {max_cells}")
    S_all, v_all = [], []
    digest = hashlib.sha256()
    trunc = 0
    for seed in cfg.seeds:
        z = panel_normals(seed, range(cfg.n_paths), n_steps)
        if zero_shocks:
            z = np.zeros_like(z)
        digest.update(np.ascontiguousarray(z).tobytes())
        S, v, nt = simulate_paths(lv, cir, r, q, S0, z, cfg.dt)
        S_all.append(S)
        v_all.append(v)
        trunc += nt
    S_arr, v_arr = np.stack(S_all), np.stack(v_all)
    if trunc:
        logger.info("CIR truncation events: %d (Feller=%s)", trunc, cir.feller)
    return PathPanel(
        seeds=cfg.seeds, S=S_arr, v=v_arr, vix=vix_proxy(v_arr, cir),
        times=np.arange(n_steps + 1) * cfg.dt, truncations=trunc, draws_sha256=digest.hexdigest(),
    )
