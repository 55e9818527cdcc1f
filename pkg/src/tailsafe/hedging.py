"""Synthetic hedging task: a short ATM call hedged with spot and a 30-day variance leg.

At each control date the delta target is the Black-Scholes delta under the
teacher vol, shifted uniformly by the index move (nu_t - nu_0) / (dnu/dsigma),
and the variance-leg target is kappa_eff(T_rem) in contracts of size
``vix_multiplier``.  PnL accrues spot carry at r - q on the stock leg and
charges temporary impact ``impact_cash_scale * (eta_S dS^2 + eta_V dV^2)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .blackscholes import bs_delta, bs_price
from .controller import (COOLDOWN_HOLD, GATE_BLOCKED, NTB_INACTION, TRADED, ControllerParams,
                         ControllerState, TelemetryRecord, controller_step)
from .dynamics import PathPanel
from .world import World

logger = logging.getLogger(__name__)

MIN_VOL = 1e-4


@dataclass
class HedgeStats:
    steps: int = 0
    ntb_steps: int = 0
    candidates: int = 0
    blocked: int = 0
    traded: int = 0
    cooldown_holds: int = 0
    dv_trades: int = 0
    small_dv_trades: int = 0
    vix_turnover: float = 0.0
    spot_turnover: float = 0.0
    min_dv_gap: int | None = None
    veto_counts: dict = field(default_factory=dict)

    @property
    def ntb_ratio(self) -> float:
        return self.ntb_steps / self.steps if self.steps else 0.0

    @property
    def block_ratio(self) -> float:
        return self.blocked / self.candidates if self.candidates else 0.0

    def merge(self, other: "HedgeStats") -> None:
        for name in ("steps", "ntb_steps", "candidates", "blocked", "traded", "cooldown_holds",
                     "dv_trades", "small_dv_trades", "vix_turnover", "spot_turnover"):
            setattr(self, name, getattr(self, name) + getattr(other, name))
        if other.min_dv_gap is not None:
            self.min_dv_gap = other.min_dv_gap if self.min_dv_gap is None else min(self.min_dv_gap, other.min_dv_gap)
        for k, v in other.veto_counts.items():
            self.veto_counts[k] = self.veto_counts.get(k, 0) + v


@dataclass(eq=False)
class HedgeResult:
    pnl: np.ndarray  # (n_seeds, n_paths)
    labels: list[tuple[int, int]]
    stats: HedgeStats
    premium: float

    @property
    def pnl_flat(self) -> np.ndarray:
        return self.pnl.ravel()


def option_premium(world: World) -> float:
    t = world.teacher
    K, T = world.option_strike, world.option_maturity
    sig = float(t.implied_vol_at_strike(K, T, extrapolate=True))
    return float(bs_price(world.spot, K, T, t.rate_r, t.div_q, sig))


def delta_targets(world: World, S: np.ndarray, T_rem: float, nu_shift: np.ndarray) -> np.ndarray:
    t = world.teacher
    K = world.option_strike
    # the smile is read at the current moneyness
    F = S * np.exp((t.rate_r - t.div_q) * T_rem)
    sig = np.asarray(t.implied_vol(np.log(K / F), T_rem, extrapolate=True), dtype=float)
    sig = np.maximum(sig + nu_shift / world.nu_per_vol, MIN_VOL)
    return np.asarray(bs_delta(S, K, T_rem, t.rate_r, t.div_q, sig), dtype=float)


def hedge_seed(world: World, params: ControllerParams, S: np.ndarray, vix: np.ndarray, seed: int,
               *, sink: Callable[[TelemetryRecord], None] | None = None,
               churn_params: ControllerParams | None = None) -> tuple[np.ndarray, HedgeStats]:
    """Run the controller along every path of one seed. S and vix have shape (n_paths, n_steps + 1)."""
    cfg = world.config
    r, q = world.teacher.rate_r, world.teacher.div_q
    n_paths, n_t = S.shape
    n_steps = n_t - 1
    dt = world.sim.dt
    T_opt = world.option_maturity
    K = world.option_strike
    M = cfg.hedge.vix_multiplier
    cash = cfg.hedge.impact_cash_scale
    churn = churn_params or params
    nu = (vix / 100.0) ** 2
    states = [ControllerState() for _ in range(n_paths)]
    gains = np.zeros(n_paths)
    costs = np.zeros(n_paths)
    last_dv = [None] * n_paths
    stats = HedgeStats()
    for t in range(n_steps):
        T_rem = T_opt - t * dt
        d_star = delta_targets(world, S[:, t], T_rem, nu[:, t] - nu[:, 0])
        k_star = float(world.kappa(T_rem)) / M
        if t == 0:
            dS_ret = np.zeros(n_paths)
            dV_ret = np.zeros(n_paths)
        else:
            dS_ret = S[:, t] / S[:, t - 1] - 1.0
            dV_ret = vix[:, t] - vix[:, t - 1]
        w = min(max(T_rem / params.T0, 0.0), 1.0)
        for i in range(n_paths):
            x, states[i], rec = controller_step(states[i], (d_star[i], k_star), (dS_ret[i], dV_ret[i]),
                                                params, T_rem, t, seed=seed, path=i)
            stats.steps += 1
            if rec.decision == NTB_INACTION:
                stats.ntb_steps += 1
            else:
                stats.candidates += 1
                if rec.decision in (GATE_BLOCKED, COOLDOWN_HOLD):
                    stats.blocked += 1
                if rec.decision == COOLDOWN_HOLD:
                    stats.cooldown_holds += 1
                if rec.veto_reason:
                    stats.veto_counts[rec.veto_reason] = stats.veto_counts.get(rec.veto_reason, 0) + 1
            if rec.decision == TRADED:
                stats.traded += 1
            if x[1] != 0.0:
                stats.dv_trades += 1
                if abs(x[1]) < 2.0 * churn.threshold_v(w):
                    stats.small_dv_trades += 1
                if last_dv[i] is not None:
                    gap = t - last_dv[i]
                    stats.min_dv_gap = gap if stats.min_dv_gap is None else min(stats.min_dv_gap, gap)
                last_dv[i] = t
            stats.vix_turnover += abs(x[1])
            stats.spot_turnover += abs(x[0])
            costs[i] += cash * (params.eta_s * x[0] ** 2 + params.eta_v * x[1] ** 2)
            if sink is not None:
                sink(rec)
        h_s = np.array([s.h_s for s in states])
        h_v = np.array([s.h_v for s in states])
        gains += h_s * (S[:, t + 1] - S[:, t] * (1.0 + (r - q) * dt)) + h_v * M * (nu[:, t + 1] - nu[:, t])
    premium = option_premium(world)
    payoff = np.maximum(S[:, -1] - K, 0.0)
    pnl = premium * np.exp(r * T_opt) - payoff + gains - costs
    return pnl, stats


def run_hedge(world: World, params: ControllerParams, panel: PathPanel, *,
              sink: Callable[[TelemetryRecord], None] | None = None,
              churn_params: ControllerParams | None = None) -> HedgeResult:
    if panel.S.shape[2] - 1 != world.sim.n_steps:
        raise ValueError("panel steps do not match the world's control grid")
    pnl = np.empty(panel.S.shape[:2])
    stats = HedgeStats()
    labels = []
    for a, seed in enumerate(panel.seeds):
        pnl[a], st = hedge_seed(world, params, panel.S[a], panel.vix[a], seed, sink=sink,
                                churn_params=churn_params)
        stats.merge(st)
        labels.extend((seed, p) for p in range(panel.S.shape[1]))
    return HedgeResult(pnl, labels, stats, option_premium(world))
