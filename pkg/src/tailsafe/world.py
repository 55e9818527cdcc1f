"""Assembles the pricing and simulation world from a configuration."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import WorldConfig
from .dynamics import CirParams, SimConfig
from .kappa_map import KappaCurve, build_kappa_curve
from .localvol import LocalVolGrid, call_price_grid, dupire_local_variance
from .market_shell import SsviSlice, TeacherSurface, VolSurface, attach_teacher, validate_no_arbitrage
from .vix_engine import VixContext

logger = logging.getLogger(__name__)

DAYS_PER_YEAR = 365.0


@dataclass(eq=False)
class World:
    config: WorldConfig
    surface: VolSurface
    teacher: TeacherSurface
    strikes: np.ndarray
    context: VixContext
    retained: tuple[np.ndarray, np.ndarray]
    local_vol: LocalVolGrid
    cir: CirParams
    sim: SimConfig
    kappa: KappaCurve
    option_strike: float
    option_maturity: float
    nu_per_vol: float

    @property
    def spot(self) -> float:
        return self.surface.spot_S0


def build_surface(cfg: WorldConfig) -> VolSurface:
    T = np.asarray(cfg.maturities_days, dtype=float) / DAYS_PER_YEAR
    slices = [SsviSlice(t, a * a * t, cfg.ssvi.rho, cfg.ssvi.phi) for t, a in zip(T, cfg.ssvi.atm_vols)]
    surface = VolSurface(slices, cfg.spot, cfg.rate, cfg.div)
    report = validate_no_arbitrage(surface)
    if not report.ok:
        raise ValueError("configured SSVI surface is not arbitrage-free:\n" + report.to_text())
    return attach_teacher(surface, cfg.teacher.fd_step_h, vol_floor=cfg.teacher.vol_floor)


def strike_grid(cfg: WorldConfig, refine: int = 1) -> np.ndarray:
    s = cfg.strikes
    n = (s.count - 1) * refine + 1
    return cfg.spot * np.exp(np.linspace(np.log(s.moneyness_low), np.log(s.moneyness_high), n))


def vix_context(cfg: WorldConfig, strikes=None) -> VixContext:
    return VixContext(strike_grid(cfg) if strikes is None else np.asarray(strikes),
                      cfg.vix.days[0], cfg.vix.days[1], cfg.vix.half_spread, cfg.vix.variance_floor)


def sim_config(cfg: WorldConfig, *, n_paths: int | None = None, n_seeds: int | None = None,
               base_seed: int | None = None) -> SimConfig:
    s = cfg.sim
    return SimConfig(s.steps_per_year, s.horizon_days, n_paths or s.n_paths, n_seeds or s.n_seeds,
                     s.base_seed if base_seed is None else base_seed)


def cir_params(cfg: WorldConfig) -> CirParams:
    c = cfg.cir
    return CirParams(c.kappa, c.theta, c.xi, c.rho, c.v0)


def build_world(cfg: WorldConfig) -> World:
    surface = build_surface(cfg)
    teacher = surface.teacher_surface()
    strikes = strike_grid(cfg)
    ctx = vix_context(cfg, strikes)
    retained = ctx.retained(surface)
    lv_days = cfg.localvol.maturities_days
    lv_mats = np.asarray(lv_days, dtype=float) / DAYS_PER_YEAR if lv_days else teacher.maturities
    prices = call_price_grid(teacher, strikes, lv_mats)
    lv = dupire_local_variance(prices, cfg.localvol.chi_floor, cfg.localvol.time_coordinate)
    sim = sim_config(cfg)
    k = cfg.kappa
    T0 = k.T0_days / DAYS_PER_YEAR
    mats = np.asarray(cfg.hedge.kappa_grid_days, dtype=float) / DAYS_PER_YEAR
    curve = build_kappa_curve(teacher, ctx, mats, eps=k.eps, masses=k.masses, kernel=k.kernel,
                              mu=k.mu, T0=T0, level=k.level, retained=retained)
    # index variance move per unit of a uniform vol shift on both bracketing expiries
    nu_per_vol = curve.index_response / (2.0 * k.eps)
    return World(
        config=cfg, surface=surface, teacher=teacher, strikes=strikes, context=ctx,
        retained=retained, local_vol=lv, cir=cir_params(cfg), sim=sim, kappa=curve,
        option_strike=cfg.spot * cfg.hedge.strike_moneyness,
        option_maturity=sim.n_steps * sim.dt, nu_per_vol=float(nu_per_vol),
    )
