"""Numerical diagnostics: error-constant tables, convergence studies, coherence bounds, run audits."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from ._validation import InsufficientGridError
from .blackscholes import bs_price, bs_vega
from .dynamics import CirParams, path_normals, vix_lipschitz_constant, vix_lipschitz_sharp
from .localvol import (CallPriceGrid, _first_derivative, _second_derivative_k, call_price_grid,
                       dupire_local_variance)
from .market_shell import FlatVolSource
from .vix_engine import (VARIANCE_FLOOR, VixContext, build_option_grid, half_interval_weights,
                         prune_wings, single_maturity_variance)

logger = logging.getLogger(__name__)

ENVELOPE_PERCENTILE = 99.0
C1_UNIFORM = 1.0 / 6.0
C2_UNIFORM = 1.0 / 12.0
CT_UNIFORM = 1.0 / 6.0
# OTM strikes required on each side of K0 before a quadrature rate is fitted
MIN_WING_STRIKES = 3


class AuditError(ValueError):
    """Telemetry stream is incomplete or malformed."""


# ---------------------------------------------------------------------------
# constants table
# ---------------------------------------------------------------------------

@dataclass
class ConstantsTable:
    envelopes: dict[str, float]
    floors: dict[str, float]
    derived: dict[str, float]

    def __post_init__(self):
        for group in (self.envelopes, self.floors, self.derived):
            for k, v in group.items():
                if not (math.isfinite(v) and v >= 0):
                    raise ValueError(f"constant {k}={v} must be finite and nonnegative")
        if not self.floors["D_floor"] > 0:
            raise ValueError("D_floor must be > 0")

    def to_rows(self) -> list[dict]:
        rows = []
        for group, d in (("envelope", self.envelopes), ("floor", self.floors), ("derived", self.derived)):
            rows.extend({"group": group, "name": k, "value": v} for k, v in d.items())
        return rows

    def bound(self, tau: float, h: float, eps_clip: float = 0.0) -> float:
        d = self.derived
        return d["C_T"] * tau ** 2 + d["C_K"] * h ** 2 + d["C_clip"] * eps_clip


def _envelope(a: np.ndarray, pct: float | None) -> float:
    a = np.abs(np.asarray(a, dtype=float))
    a = a[np.isfinite(a)]
    if a.size == 0:
        return 0.0
    return float(np.percentile(a, pct) if pct is not None else a.max())


def measure_envelopes(grid: CallPriceGrid, *, chi_floor: float = 1e-7,
                      w_floor: float = VARIANCE_FLOOR, cir: CirParams | None = None,
                      percentile: float = ENVELOPE_PERCENTILE) -> ConstantsTable:
    """Derivative envelopes by finite-difference cascades; derived error constants.

    Third and fourth derivatives use the given percentile of |value| instead of the
    raw supremum so a single noisy node does not dominate.
    """
    K, T, C = grid.strikes, grid.maturities, grid.prices
    if K.size < 5 or T.size < 4:
        raise InsufficientGridError("envelope cascade needs at least 5 strikes and 4 maturities")
    r, q = grid.rate_r, grid.div_q
    C_T = _first_derivative(C, T, axis=1)
    C_TT = _first_derivative(C_T, T, axis=1)
    C_TTT = _first_derivative(C_TT, T, axis=1)
    C_K = _first_derivative(C, K, axis=0)
    C_KK = _second_derivative_k(C, K)
    C_KKK = _first_derivative(C_KK, K, axis=0)
    C_KKKK = _second_derivative_k(C_KK, K)
    K_min, K_max = float(K[0]), float(K[-1])
    env = {
        "M_TTT": _envelope(C_TTT, percentile),
        "M_KKK": _envelope(C_KKK, percentile),
        "M_KKKK": _envelope(C_KKKK, percentile),
        "M_KK": _envelope(C_KK, None),
        "M_TT": _envelope(C_TT, None),
    }
    env["M_N"] = (_envelope(C_T, None) + abs(r - q) * K_max * _envelope(C_K, None)
                  + abs(q) * _envelope(C, None))
    D_floor = 0.5 * K_min ** 2 * chi_floor
    floors = {"chi_floor": chi_floor, "D_floor": D_floor, "w_floor": w_floor}
    CN_T = CT_UNIFORM * env["M_TTT"] + abs(q) / 8.0 * env["M_TT"]
    CN_K = abs(r - q) * K_max * C1_UNIFORM * env["M_KKK"] + abs(q) / 8.0 * env["M_KK"]
    CD_K = 0.5 * K_max ** 2 * C2_UNIFORM * env["M_KKKK"]
    derived = {
        "C_N_T": CN_T, "C_N_K": CN_K, "C_D_K": CD_K,
        "C_T": CN_T / D_floor,
        "C_K": CN_K / D_floor + env["M_N"] / D_floor ** 2 * CD_K,
        "C_clip": env["M_N"] / D_floor ** 2 * 0.5 * K_max ** 2,
        "C_max": float(np.max(dupire_local_variance(grid, chi_floor).nodes)),
    }
    if cir is not None:
        derived["L_VIX"] = vix_lipschitz_constant(cir)
        derived["L_VIX_sharp"] = vix_lipschitz_sharp(cir)
    return ConstantsTable(env, floors, derived)


# ---------------------------------------------------------------------------
# convergence studies
# ---------------------------------------------------------------------------

@dataclass
class ConvergenceStudy:
    name: str
    refinement_levels: list[float]
    errors: list[float]
    fitted_slope: float
    target_order: float
    passed: bool
    lower: float = -math.inf
    upper: float = math.inf
    mesh: list[float] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.refinement_levels) < 3:
            raise InsufficientGridError("a convergence study needs at least 3 levels")

    def to_rows(self) -> list[dict]:
        return [{"study": self.name, "level": lvl, "error": err,
                 "mesh": self.mesh[i] if self.mesh else float("nan"),
                 "fitted_slope": self.fitted_slope, "passed": self.passed}
                for i, (lvl, err) in enumerate(zip(self.refinement_levels, self.errors))]


def fit_slope(x, y) -> float:
    """Least-squares slope of log y against log x."""
    lx, ly = np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float))
    return float(np.polyfit(lx, ly, 1)[0])


def refine_log_grid(strikes, factor: int) -> np.ndarray:
    """Insert factor - 1 log-spaced points in every strike interval."""
    K = np.asarray(strikes, dtype=float)
    if factor == 1:
        return K.copy()
    lk = np.log(K)
    pieces = [np.linspace(a, b, factor + 1)[:-1] for a, b in zip(lk[:-1], lk[1:])]
    return np.exp(np.concatenate(pieces + [lk[-1:]]))


def quadrature_convergence(source, strikes, T: float, factors=(1, 2, 4), ref_factor: int = 16,
                           half_spread: float = 0.0, lower: float = -2.3, upper: float = -1.7,
                           ) -> ConvergenceStudy:
    """Single-maturity variance error against a refined reference, corridor fixed by level-1 pruning."""
    factors = list(factors)
    if len(set(factors)) < len(factors) or len(factors) < 3:
        raise InsufficientGridError("refinement levels must be distinct and at least 3")
    base = np.asarray(strikes, dtype=float)
    if base.size < 5:
        raise InsufficientGridError("quadrature study needs at least 5 strikes")
    g0 = build_option_grid(source, T, base, half_spread)
    kept = prune_wings(g0)
    lo, hi = kept[0], kept[-1]
    n_put, n_call = int(np.sum(kept < g0.K0)), int(np.sum(kept > g0.K0))
    if min(n_put, n_call) < MIN_WING_STRIKES:
        raise InsufficientGridError(f"retained corridor has {n_put} put and {n_call} call strikes; "
                                    f"need {MIN_WING_STRIKES} per wing for an asymptotic rate")

    def variance(f):
        K = refine_log_grid(base, f)
        K = K[(K >= lo * (1 - 1e-12)) & (K <= hi * (1 + 1e-12))]
        g = build_option_grid(source, T, K, half_spread)
        return single_maturity_variance(g, K).variance, float(np.max(np.diff(K)))

    ref, _ = variance(ref_factor)
    errs, mesh = [], []
    for f in factors:
        v, h = variance(f)
        errs.append(abs(v - ref))
        mesh.append(h)
    if min(errs) <= 0:
        raise InsufficientGridError("zero quadrature error at some level; study is degenerate")
    slope = fit_slope(factors, errs)
    return ConvergenceStudy("quadrature", factors, errs, slope, -2.0, lower <= slope <= upper,
                            lower, upper, mesh, {"T": T, "reference_factor": ref_factor})


def _refined_tensor(strikes, maturities, level: int):
    K = refine_log_grid(strikes, level)
    T = [maturities[0]]
    for a, b in zip(maturities[:-1], maturities[1:]):
        T.extend(np.linspace(a, b, level + 1)[1:])
    return K, np.asarray(T)


def dupire_convergence(sigma: float = 0.2, spot: float = 4800.0, r: float = 0.02, q: float = 0.015,
                       strikes=None, maturities_days=(7, 14, 30, 60, 90, 180), factors=(1, 2, 4),
                       chi_floor: float = 1e-7, time_coordinate: str = "sqrt",
                       tol_max: float = 1e-2, min_order: float = 1.7) -> ConvergenceStudy:
    """Flat-vol recovery: max |sigma_loc - sigma| over interior non-clipped base nodes per level."""
    if strikes is None:
        strikes = spot * np.exp(np.linspace(math.log(0.7), math.log(1.3), 41))
    src = FlatVolSource(sigma, spot, r, q)
    T0 = np.asarray(maturities_days, dtype=float) / 365.0
    errs, core, mesh = [], [], []
    for lev in factors:
        K, T = _refined_tensor(strikes, T0, lev)
        lv = dupire_local_variance(call_price_grid(src, K, T), chi_floor, time_coordinate)
        e = np.abs(lv.vol - sigma)[::lev, ::lev][1:-1, 1:-1]
        clip = lv.clip_mask[::lev, ::lev][1:-1, 1:-1]
        kc = np.log(K[::lev][1:-1] / spot)[:, None]
        Tc = T[::lev][1:-1][None, :]
        in_core = np.abs(kc) <= 2.0 * sigma * np.sqrt(Tc)
        errs.append(float(e[~clip].max()))
        core.append(float(e[in_core & ~clip].max()))
        mesh.append(float(np.max(np.diff(K))))
    order = -fit_slope(factors, errs)
    passed = errs[0] <= tol_max and order >= min_order
    return ConvergenceStudy("dupire_flat", list(factors), errs, -order, -2.0, passed, mesh=mesh,
                            notes={"max_error_level1": errs[0], "order": order,
                                   "core_errors": core, "core_order": -fit_slope(factors, core),
                                   "tol_max": tol_max, "min_order": min_order})


def dupire_bound_check(sigma: float = 0.2, spot: float = 4800.0, r: float = 0.02, q: float = 0.015,
                       strikes=None, maturities_days=(7, 14, 30, 60, 90, 180),
                       chi_floor: float = 1e-7) -> dict:
    """Observed |sigma2_disc - sigma2| against C_T tau^2 + C_K h^2 at non-clipped nodes."""
    if strikes is None:
        strikes = spot * np.exp(np.linspace(math.log(0.7), math.log(1.3), 41))
    src = FlatVolSource(sigma, spot, r, q)
    T = np.asarray(maturities_days, dtype=float) / 365.0
    grid = call_price_grid(src, strikes, T)
    lv = dupire_local_variance(grid, chi_floor, "linear")
    table = measure_envelopes(grid, chi_floor=chi_floor)
    tau, h = float(np.max(np.diff(T))), float(np.max(np.diff(grid.strikes)))
    obs = np.abs(lv.nodes - sigma ** 2)[~lv.clip_mask]
    bound = table.bound(tau, h)
    return {"observed_max": float(obs.max()), "bound": bound, "passed": bool(obs.max() <= bound),
            "C_max_exceeds_observed": bool(table.derived["C_max"] >= float(np.max(lv.nodes)))}


def strong_order_study(vol_fn, spot: float = 100.0, r: float = 0.02, q: float = 0.015,
                       horizon: float = 1.0, steps=(16, 32, 64, 128), n_paths: int = 10_000,
                       seed: int = 2024, lower: float = 0.4, upper: float = 0.75) -> ConvergenceStudy:
    """RMS terminal error of log-Euler against a 4x-finer reference on common Brownian increments."""
    steps = sorted(int(s) for s in steps)
    n_ref = steps[-1] * 4
    for s in steps:
        if n_ref % s:
            raise ValueError("step counts must divide the reference count")
    z = np.stack([path_normals(seed, p, n_ref, 1)[:, 0] for p in range(n_paths)])
    dW = z * math.sqrt(horizon / n_ref)

    def terminal(n):
        inc = dW.reshape(n_paths, n, n_ref // n).sum(axis=2)
        dt = horizon / n
        S = np.full(n_paths, float(spot))
        t = 0.0
        for k in range(n):
            sig = np.asarray(vol_fn(S, t), dtype=float)
            S = S * np.exp((r - q - 0.5 * sig * sig) * dt + sig * inc[:, k])
            t += dt
        return S

    ref = terminal(n_ref)
    errs = [float(np.sqrt(np.mean((terminal(n) - ref) ** 2))) for n in steps]
    dts = [horizon / n for n in steps]
    scale = max(abs(spot), 1.0)
    if max(errs) <= 1e-12 * scale:
        return ConvergenceStudy("strong_order", dts, errs, float("nan"), 0.5, True, lower, upper,
                                notes={"exact": True})
    slope = fit_slope(dts, errs)
    return ConvergenceStudy("strong_order", dts, errs, slope, 0.5, lower <= slope <= upper,
                            lower, upper, notes={"exact": False, "n_paths": n_paths})


def smooth_test_vol(S, t):
    """sigma(S) = 0.2 (1 + 0.1 sin(ln S))."""
    return 0.2 * (1.0 + 0.1 * np.sin(np.log(S)))


# ---------------------------------------------------------------------------
# CIR proxy checks
# ---------------------------------------------------------------------------

def cir_proxy_mc(p: CirParams, tau: float = 30.0 / 365.0, n_paths: int = 100_000, n_steps: int = 300,
                 seed: int = 11) -> dict:
    """Monte Carlo of (1/tau) int_0^tau E[v] (trapezoid in time) against theta + (v0 - theta) B."""
    from .dynamics import vix_loading

    dt = tau / n_steps
    rng_seed = np.random.SeedSequence([seed, 0xC1A]).generate_state(1)[0]
    gen = np.random.Generator(np.random.Philox(int(rng_seed)))
    v = np.full(n_paths, p.v0)
    acc = 0.5 * v
    for k in range(n_steps):
        z = gen.standard_normal(n_paths)
        vp = np.maximum(v, 0.0)
        v = np.maximum(v + p.kappa_mr * (p.theta_lr - vp) * dt + p.xi_volvol * np.sqrt(vp * dt) * z, 0.0)
        acc += v if k < n_steps - 1 else 0.5 * v
    avg = acc / n_steps
    est = float(avg.mean())
    se = float(avg.std(ddof=1) / math.sqrt(n_paths))
    exact = p.theta_lr + (p.v0 - p.theta_lr) * vix_loading(p, tau)
    return {"estimate": est, "closed_form": exact, "se": se, "z": abs(est - exact) / se,
            "passed": abs(est - exact) <= 3.0 * se}


def vix_lipschitz_check(p: CirParams, n_pairs: int = 10_000, v_max: float | None = None,
                        seed: int = 5, constant: float | None = None) -> dict:
    """Count pairs with |VIX(v1) - VIX(v2)| > L |v1 - v2| + 1e-12, v uniform on [0, v_max]."""
    from .dynamics import vix_proxy

    rng = np.random.default_rng(seed)
    v_max = 4.0 * p.theta_lr if v_max is None else v_max
    v1, v2 = rng.uniform(0, v_max, n_pairs), rng.uniform(0, v_max, n_pairs)
    L = vix_lipschitz_constant(p) if constant is None else constant
    lhs = np.abs(vix_proxy(v1, p) - vix_proxy(v2, p))
    bad = lhs > L * np.abs(v1 - v2) + 1e-12
    ratio = lhs / np.maximum(np.abs(v1 - v2), 1e-300)
    return {"violations": int(bad.sum()), "n_pairs": n_pairs, "L_stated": vix_lipschitz_constant(p),
            "L_sharp": vix_lipschitz_sharp(p), "max_ratio": float(ratio.max()), "passed": not bad.any()}


# ---------------------------------------------------------------------------
# coherence bound
# ---------------------------------------------------------------------------

def _f_second_derivative_sup(source, T: float, K_lo: float, K0: float, K_hi: float,
                             n: int = 2001) -> float:
    """sup |d2/dK2 e^{rT} Q(K)/K^2| on each OTM piece, by finite differences."""
    r, q, S0 = source.rate_r, source.div_q, source.spot_S0
    best = 0.0
    for a, b, is_call in ((K_lo, K0, False), (K0, K_hi, True)):
        if b <= a:
            continue
        K = np.linspace(a, b, n)
        sig = source.implied_vol_at_strike(K, T, extrapolate=True)
        f = np.exp(r * T) * bs_price(S0, K, T, r, q, sig, is_call=is_call) / K ** 2
        h = K[1] - K[0]
        d2 = (f[2:] - 2 * f[1:-1] + f[:-2]) / (h * h)
        best = max(best, float(np.max(np.abs(d2))))
    return best


def coherence_bound(surface_a, surface_b, context: VixContext, retained, *,
                    w_floor: float | None = None) -> dict:
    """C_coh * eps_shape + C_quad * max dK^2 for the 30-day index residual.

    The uniform version uses the variance floor and the ATM vega envelope
    S0 e^{-qT} sqrt(T / 2 pi); the sharp version uses the smaller observed 30-day
    variance and per-strike vegas.
    """
    w_floor = context.variance_floor if w_floor is None else w_floor
    T12 = context.maturities
    from .vix_engine import minute_weights

    lams = minute_weights(*context.minutes)
    S0, r, q = surface_b.spot_S0, surface_b.rate_r, surface_b.div_q
    eps_shape = 0.0
    coh_uniform = coh_sharp = quad = 0.0
    max_dk = 0.0
    res_a = context.evaluate(surface_a, retained)
    res_b = context.evaluate(surface_b, retained)
    s2_min = max(min(res_a.sigma2_30, res_b.sigma2_30), w_floor)
    annual = 365.0 / 30.0
    for lam, T, Kr in zip(lams, T12, retained):
        Kr = np.asarray(Kr, dtype=float)
        sa = np.asarray(surface_a.implied_vol_at_strike(Kr, T), dtype=float)
        sb = np.asarray(surface_b.implied_vol_at_strike(Kr, T), dtype=float)
        eps_shape = max(eps_shape, float(np.max(np.abs(sa - sb))))
        dK = half_interval_weights(Kr)
        kernel = dK * math.exp(r * T) / Kr ** 2
        vega_bar = S0 * math.exp(-q * T) * math.sqrt(T) / math.sqrt(2 * math.pi)
        vegas = np.maximum(bs_vega(S0, Kr, T, r, q, sa), bs_vega(S0, Kr, T, r, q, sb))
        coh_uniform += lam * T * (2.0 / T) * vega_bar * kernel.sum()
        coh_sharp += lam * T * (2.0 / T) * float(np.sum(kernel * vegas))
        g = build_option_grid(surface_b, T, Kr)
        f2 = (_f_second_derivative_sup(surface_a, T, Kr[0], g.K0, Kr[-1])
              + _f_second_derivative_sup(surface_b, T, Kr[0], g.K0, Kr[-1]))
        quad += lam * T * (2.0 / T) * (Kr[-1] - Kr[0]) / 12.0 * f2
        max_dk = max(max_dk, float(np.max(np.diff(Kr))))
    C_coh = 50.0 / math.sqrt(w_floor) * annual * coh_uniform
    C_quad = 50.0 / math.sqrt(w_floor) * annual * quad
    C_coh_sharp = 50.0 / math.sqrt(s2_min) * annual * coh_sharp
    C_quad_sharp = 50.0 / math.sqrt(s2_min) * annual * quad
    # both pipelines share the quadrature, so the residual carries only its difference; the
    # quadrature term is kept as stated for the uniform bound
    out = {
        "eps_shape": eps_shape, "C_coh": C_coh, "C_quad": C_quad, "max_dK": max_dk,
        "bound": C_coh * eps_shape + C_quad * max_dk ** 2,
        "C_coh_sharp": C_coh_sharp, "C_quad_sharp": C_quad_sharp,
        "bound_sharp": C_coh_sharp * eps_shape + C_quad_sharp * max_dk ** 2,
        "sigma2_30_min": s2_min,
    }
    return {k: float(v) for k, v in out.items()}


# ---------------------------------------------------------------------------
# run audits
# ---------------------------------------------------------------------------

@dataclass
class Violation:
    seed: int
    path: int
    step: int
    invariant: str
    detail: str = ""


@dataclass
class AuditReport:
    n_paths: int
    n_records: int
    violations: list[Violation]
    per_path: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    budget: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.violations

    def count(self, invariant: str) -> int:
        return sum(1 for v in self.violations if v.invariant == invariant)


INVARIANTS = ("descent", "traded_risk_decrease", "inventory_barrier", "dwell_time",
              "turnover_budget", "rate_cap")


def _records_by_path(records: Iterable) -> dict:
    paths: dict = {}
    for rec in records:
        d = rec if isinstance(rec, dict) else rec.to_dict()
        paths.setdefault((int(d["seed"]), int(d["path"])), []).append(d)
    return paths


def read_telemetry(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise AuditError(f"telemetry line {i} is not valid JSON: {exc}") from None
    return out


_REQUIRED = ("step_index", "decision", "trade", "risk_before", "risk_after", "cost", "seed", "path")


def audit_run(records: Iterable, *, n_steps: int | None = None, tol: float = 1e-10) -> AuditReport:
    """Descent, barrier, dwell, turnover-budget and rate-cap checks per (seed, path).

    The turnover budget allows for target drift between steps:
    sum C(x_t) <= [R(e_0) + sum_t max(R_t^- - R_{t-1}^+, 0)] / (tau_min - lambda_c).
    """
    paths = _records_by_path(records)
    violations: list[Violation] = []
    per_path = {}
    budget_slack = []
    n_rec = 0
    for (seed, path), recs in sorted(paths.items()):
        for d in recs:
            missing = [k for k in _REQUIRED if k not in d]
            if missing:
                raise AuditError(f"record for path ({seed}, {path}) lacks fields {missing}")
        recs = sorted(recs, key=lambda d: d["step_index"])
        steps = [d["step_index"] for d in recs]
        if steps != list(range(len(recs))) or (n_steps is not None and len(recs) != n_steps):
            raise AuditError(f"truncated or out-of-order telemetry for path ({seed}, {path})")
        n_rec += len(recs)
        ok = True
        last_dv = None
        spent = 0.0
        supply = 0.0
        prev_after = None
        tau_lc = []
        for d in recs:
            t = d["step_index"]
            dS, dV = d["trade"]
            traded = d["decision"] == "traded"

            def flag(name, detail=""):
                nonlocal ok
                ok = False
                violations.append(Violation(seed, path, t, name, detail))

            if traded:
                if not d["risk_after"] < d["risk_before"]:
                    flag("traded_risk_decrease", f"{d['risk_after']:.6g} >= {d['risk_before']:.6g}")
                margin = d.get("tau_w", 0.0) - d.get("lambda_c", 0.0)
                if d["risk_after"] > d["risk_before"] - margin * d["cost"] + tol:
                    flag("descent", "executed trade")
                q_after, q_cost = d.get("qp_risk_after"), d.get("qp_cost")
                if q_after is not None and q_cost is not None and math.isfinite(q_after) \
                        and d.get("veto_reason", "") == "":
                    if q_after > d["risk_before"] - margin * q_cost + tol:
                        flag("descent", "QP solution")
            if "inv_bounds" in d:
                Hs, Hv = d["inv_bounds"]
                if Hs - abs(d.get("h_s", 0.0)) < -tol or Hv - abs(d.get("h_v", 0.0)) < -tol:
                    flag("inventory_barrier", f"h=({d.get('h_s')}, {d.get('h_v')})")
            if "rate_caps" in d:
                cap = max(d["rate_caps"])
                if max(abs(dS), abs(dV)) > cap + tol:
                    flag("rate_cap", f"|x|_inf={max(abs(dS), abs(dV)):.6g} > {cap:.6g}")
            if dV != 0.0:
                n_cd = int(d.get("cooldown_steps", 0))
                if last_dv is not None and n_cd > 0 and t - last_dv < n_cd + 1:
                    flag("dwell_time", f"gap {t - last_dv} < {n_cd + 1}")
                last_dv = t
            r_minus = d["risk_before"]
            supply += r_minus if prev_after is None else max(r_minus - prev_after, 0.0)
            prev_after = d["risk_after"]
            if traded and (dS != 0.0 or dV != 0.0):
                spent += d["cost"]
                tau_lc.append(d.get("tau_w", 0.0) - d.get("lambda_c", 0.0))
        if tau_lc:
            denom = min(tau_lc)
            allowed = supply / denom if denom > 0 else math.inf
            budget_slack.append(allowed - spent)
            if spent > allowed + tol * max(1.0, allowed):
                ok = False
                violations.append(Violation(seed, path, len(recs) - 1, "turnover_budget",
                                            f"spent {spent:.6g} > allowed {allowed:.6g}"))
        per_path[(seed, path)] = ok
    counts = {name: sum(1 for v in violations if v.invariant == name) for name in INVARIANTS}
    budget = {"min_slack": float(min(budget_slack)) if budget_slack else float("nan")}
    return AuditReport(len(paths), n_rec, violations, per_path, counts, budget)


def robust_margin(sigma_i: float, alpha_i: float, L_h: float = 1.0, D_norm: float = 0.0,
                  w_bar: float = 0.0) -> float:
    """delta_i = (sigma_i + L_h ||D|| w_bar) / alpha_i."""
    if not 0 < alpha_i < 1:
        raise ValueError("alpha_i must lie in (0, 1) for a finite margin")
    if min(sigma_i, L_h, D_norm, w_bar) < 0:
        raise ValueError("margin inputs must be nonnegative")
    return (sigma_i + L_h * D_norm * w_bar) / alpha_i


# ---------------------------------------------------------------------------
# QP certificates on controller-generated problems
# ---------------------------------------------------------------------------

def random_controller_problem(rng: np.random.Generator, params=None):
    """A step QP from a randomized controller state, error vector, horizon and correlation."""
    from .controller import ControllerParams, ControllerState, build_step_qp, dynamic_vix_weight

    p = params or ControllerParams()
    bx = p.boxes
    state = ControllerState(
        h_s=float(rng.uniform(-bx.inv_s, bx.inv_s)), h_v=float(rng.uniform(-bx.inv_v, bx.inv_v)),
        prev_trade=(float(rng.normal(0, bx.rate_s / 2)), float(rng.normal(0, bx.rate_v / 2))),
        cooldown_v=int(rng.integers(0, p.cooldown_steps + 1)),
    )
    e = rng.normal(0.0, 1.0, 2) * np.array([bx.err_s, bx.err_v]) * rng.choice([0.1, 1.0, 3.0])
    w = float(rng.uniform(0, 1))
    rho = float(rng.uniform(-0.95, 0.95))
    w_eff = dynamic_vix_weight(p, w, rho) if p.dynamic_weight else p.w_vix_base
    return build_step_qp(state, e, p, w, rho, w_eff)


def qp_certificate_study(n_problems: int = 10_000, seed: int = 99, tol: float = 1e-8) -> dict:
    """KKT residual, row-permutation invariance of x* and origin feasibility."""
    from .qp_core import solve, verify_kkt

    rng = np.random.default_rng(seed)
    worst_kkt = worst_perm = 0.0
    origin_ok = n_fail = 0
    for _ in range(n_problems):
        prob = random_controller_problem(rng)
        origin_ok += prob.origin_feasible()
        sol = solve(prob)
        if sol.status == "numerical-failure":
            n_fail += 1
            continue
        worst_kkt = max(worst_kkt, verify_kkt(prob, sol, tol).max_residual)
        perm = solve(prob.permuted(rng.permutation(len(prob.constraints))))
        worst_perm = max(worst_perm, float(np.max(np.abs(perm.x_star - sol.x_star))))
    return {"n": n_problems, "max_kkt": worst_kkt, "max_perm_diff": worst_perm,
            "origin_feasible": origin_ok, "numerical_failures": n_fail,
            "passed": worst_kkt <= tol and worst_perm <= tol and origin_ok == n_problems and n_fail == 0}
