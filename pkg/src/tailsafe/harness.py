"""Batch runs: pools, scenario grids, ablations and the consolidated verification suite."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .config import WorldConfig
from .controller import ControllerParams, TelemetryRecord, baseline_params
from .dynamics import PathPanel, simulate_pool
from .hedging import HedgeResult, run_hedge
from .risk_metrics import LossSample, bootstrap_ci, bootstrap_es_ci, paired_bootstrap_delta_es, var_es
from .world import DAYS_PER_YEAR, World, build_world, sim_config

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ("metric", "point", "ci_low", "ci_high", "n", "resamples", "seed", "config_hash")
ABLATION_TOGGLES = ("fix_w_vix", "remove_guards", "no_micro_thresholds", "no_cooldown", "zero_cross_term")


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def run_id(cfg: WorldConfig, stamp: str | None = None) -> str:
    stamp = stamp or time.strftime("%Y%m%dT%H%M%S")
    return f"{cfg.config_hash()}-{stamp}"


def make_run_dir(out: str | Path, cfg: WorldConfig, stamp: str | None = None) -> Path:
    d = Path(out) / run_id(cfg, stamp)
    (d / "studies").mkdir(parents=True, exist_ok=True)
    return d


def write_csv(path: str | Path, rows: list[dict], columns=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = list(rows)
    cols = list(columns) if columns else (list(rows[0]) if rows else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in cols})
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


class TelemetryWriter:
    """Buffers records per (seed, path) and writes them ordered by (seed, path, step)."""

    def __init__(self, path: str | Path | None, keep: bool = False):
        self.path = Path(path) if path is not None else None
        self.keep = keep or self.path is not None
        self._buf: dict[tuple[int, int], list[dict]] = {}

    def __call__(self, rec: TelemetryRecord) -> None:
        if self.keep:
            self._buf.setdefault((rec.seed, rec.path), []).append(rec.to_dict())

    def records(self) -> list[dict]:
        out = []
        for key in sorted(self._buf):
            out.extend(sorted(self._buf[key], key=lambda d: d["step_index"]))
        return out

    def flush(self, extra: dict | None = None) -> None:
        if self.path is None:
            return
        with open(self.path, "w", encoding="utf-8") as fh:
            for d in self.records():
                if extra:
                    d = {**d, **extra}
                fh.write(json.dumps(d, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# pools
# ---------------------------------------------------------------------------

def simulate_panel(world: World, *, n_paths: int | None = None, n_seeds: int | None = None,
                   base_seed: int | None = None) -> PathPanel:
    sc = sim_config(world.config, n_paths=n_paths, n_seeds=n_seeds, base_seed=base_seed)
    r, q = world.teacher.rate_r, world.teacher.div_q
    return simulate_pool(sc, world.local_vol, world.cir, r, q, world.spot)


def controller_params(cfg: WorldConfig) -> ControllerParams:
    return cfg.controller.to_params(cfg.kappa.T0_days / DAYS_PER_YEAR)


def losses_of(result: HedgeResult) -> LossSample:
    return LossSample.from_pnl(result.pnl_flat, result.labels)


@dataclass
class PoolReport:
    rows: list[dict]
    result: HedgeResult
    config_hash: str
    draws_sha256: str
    telemetry: list[dict] = field(default_factory=list)
    run_dir: Path | None = None

    def metric(self, name: str) -> float:
        for r in self.rows:
            if r["metric"] == name:
                return r["point"]
        raise KeyError(name)


def pool_rows(result: HedgeResult, cfg: WorldConfig) -> list[dict]:
    """Mean, std, VaR_97.5, ES_97.5 with bootstrap CIs, plus NTB and gate-block ratios."""
    b = cfg.bootstrap
    pnl = result.pnl_flat
    losses = losses_of(result)
    h = cfg.config_hash()
    n = pnl.size
    rows = []
    if np.ptp(pnl) == 0.0:
        # a degenerate sample has degenerate intervals
        var, es = var_es(losses, b.alpha) if n >= 2 else (float(-pnl[0]), float(-pnl[0]))
        for name, val in (("mean", float(pnl[0])), ("std", 0.0), ("VaR_97.5", var), ("ES_97.5", es)):
            rows.append({"metric": name, "point": val + 0.0, "ci_low": val + 0.0, "ci_high": val + 0.0,
                         "n": n, "resamples": b.resamples, "seed": b.seed})
    else:
        rows.append(bootstrap_ci(pnl, np.mean, b.resamples, b.seed).to_row("mean"))
        rows.append(bootstrap_ci(pnl, lambda x: float(np.std(x, ddof=1)), b.resamples, b.seed).to_row("std"))
        var_ci = bootstrap_ci(losses.losses, lambda x: var_es(x, b.alpha)[0], b.resamples, b.seed)
        rows.append(var_ci.to_row("VaR_97.5"))
        rows.append(bootstrap_es_ci(losses, b.alpha, b.resamples, b.seed).to_row("ES_97.5"))
    st = result.stats
    nan = float("nan")
    for name, val in (("NTB_ratio", st.ntb_ratio), ("gate_block_ratio", st.block_ratio),
                      ("small_dV_trades", float(st.small_dv_trades)), ("dV_trades", float(st.dv_trades)),
                      ("vix_turnover", st.vix_turnover), ("spot_turnover", st.spot_turnover)):
        rows.append({"metric": name, "point": float(val), "ci_low": nan, "ci_high": nan, "n": n,
                     "resamples": 0, "seed": b.seed})
    for r in rows:
        r["config_hash"] = h
    return rows


def run_pool(cfg: WorldConfig, *, world: World | None = None, params: ControllerParams | None = None,
             n_paths: int | None = None, n_seeds: int | None = None, base_seed: int | None = None,
             panel: PathPanel | None = None, out: str | Path | None = None,
             keep_telemetry: bool = False) -> PoolReport:
    """Simulate, hedge and aggregate one pool; with ``out`` the run directory is written."""
    world = world or build_world(cfg)
    params = params or controller_params(cfg)
    panel = panel or simulate_panel(world, n_paths=n_paths, n_seeds=n_seeds, base_seed=base_seed)
    run_dir = make_run_dir(out, cfg) if out is not None else None
    sink = TelemetryWriter(run_dir / "telemetry.jsonl" if run_dir else None, keep_telemetry)
    result = run_hedge(world, params, panel, sink=sink)
    rows = pool_rows(result, cfg)
    report = PoolReport(rows, result, cfg.config_hash(), panel.draws_sha256,
                        sink.records() if keep_telemetry else [])
    if run_dir is not None:
        write_csv(run_dir / "report.csv", rows, REPORT_COLUMNS)
        sink.flush()
        _write_constants(run_dir, world)
        (run_dir / "config.yaml").write_text(_dump(cfg), encoding="utf-8")
        logger.info("pool written to %s", run_dir)
        report.run_dir = run_dir
    return report


def _dump(cfg: WorldConfig) -> str:
    from .config import dump_config

    return dump_config(cfg)


def _write_constants(run_dir: Path, world: World) -> None:
    from .localvol import call_price_grid
    from .verification import measure_envelopes

    grid = call_price_grid(world.teacher, world.strikes, world.teacher.maturities)
    table = measure_envelopes(grid, chi_floor=world.config.localvol.chi_floor, cir=world.cir)
    write_csv(run_dir / "constants.csv", table.to_rows(), ("group", "name", "value"))


# ---------------------------------------------------------------------------
# paired comparisons
# ---------------------------------------------------------------------------

def paired_delta(a: HedgeResult, b: HedgeResult, cfg: WorldConfig):
    bs = cfg.bootstrap
    return paired_bootstrap_delta_es(losses_of(a), losses_of(b), bs.alpha, bs.paired_resamples, bs.seed)


def cell_config(cfg: WorldConfig, xi: float, rho: float) -> WorldConfig:
    return cfg.with_overrides(cir={"xi": xi, "rho": rho})


def run_scenario_grid(cfg: WorldConfig, *, xi_values=None, rho_values=None, seeds_per_cell=None,
                      paths_per_seed=None, base_seed: int | None = None,
                      safe: ControllerParams | None = None, baseline: ControllerParams | None = None,
                      out: str | Path | None = None) -> list[dict]:
    """Paired ES difference (safe minus baseline) per (xi, rho) cell on shared draws."""
    g = cfg.grid
    xis = list(xi_values if xi_values is not None else g.xi_values)
    rhos = list(rho_values if rho_values is not None else g.rho_values)
    if not xis or not rhos:
        raise ValueError("scenario axes must be nonempty")
    safe = safe or controller_params(cfg)
    baseline = baseline or baseline_params(safe)
    n_seeds = seeds_per_cell or g.seeds_per_cell
    n_paths = paths_per_seed or g.paths_per_seed
    rows = []
    for xi in xis:
        for rho in rhos:
            c = cell_config(cfg, xi, rho)
            world = build_world(c)
            panel = simulate_panel(world, n_paths=n_paths, n_seeds=n_seeds, base_seed=base_seed)
            ra = run_hedge(world, safe, panel)
            rb = run_hedge(world, baseline, panel)
            d = paired_delta(ra, rb, c)
            rows.append({"xi": xi, "rho": rho, "delta_es": d.point, "ci_low": d.ci_low, "ci_high": d.ci_high,
                         "excludes_zero": d.excludes_zero, "n": d.n, "resamples": d.resamples,
                         "draws_sha256": panel.draws_sha256, "config_hash": cfg.config_hash()})
            logger.info("cell xi=%.2f rho=%.2f dES=%.3f [%.3f, %.3f]", xi, rho, d.point, d.ci_low, d.ci_high)
    if out is not None:
        run_dir = make_run_dir(out, cfg)
        write_csv(run_dir / "studies" / "scenario_grid.csv", rows)
        write_csv(run_dir / "report.csv", rows)
    return rows


def ablation_params(full: ControllerParams, toggle: str) -> ControllerParams:
    if toggle == "fix_w_vix":
        return replace(full, dynamic_weight=False)
    if toggle == "remove_guards":
        return replace(full, use_guards=False)
    if toggle == "no_micro_thresholds":
        return replace(full, use_thresholds=False)
    if toggle == "no_cooldown":
        return replace(full, use_cooldown=False)
    if toggle == "zero_cross_term":
        return replace(full, alpha_cross=0.0)
    raise ValueError(f"unknown ablation toggle {toggle!r}; expected one of {ABLATION_TOGGLES}")


def run_ablation(cfg: WorldConfig, *, toggles=ABLATION_TOGGLES, xi: float | None = None,
                 rho: float | None = None, n_paths: int | None = None, n_seeds: int | None = None,
                 base_seed: int | None = None, full: ControllerParams | None = None,
                 include_baseline: bool = False, out: str | Path | None = None) -> list[dict]:
    """One variant per toggle, each compared with the full controller on the same draws.

    The churn count uses the full controller's micro-thresholds so every variant is
    measured against the same yardstick.
    """
    c = cell_config(cfg, cfg.cir.xi if xi is None else xi, cfg.cir.rho if rho is None else rho)
    world = build_world(c)
    full = full or controller_params(c)
    panel = simulate_panel(world, n_paths=n_paths, n_seeds=n_seeds, base_seed=base_seed)
    ref = run_hedge(world, full, panel, churn_params=full)
    variants = [(t, ablation_params(full, t)) for t in toggles]
    if include_baseline:
        variants.append(("baseline", baseline_params(full)))
    rows = [_ablation_row("full", ref, ref, c, panel)]
    for name, p in variants:
        res = run_hedge(world, p, panel, churn_params=full)
        rows.append(_ablation_row(name, res, ref, c, panel))
    if out is not None:
        run_dir = make_run_dir(out, cfg)
        write_csv(run_dir / "studies" / "ablation.csv", rows)
        write_csv(run_dir / "report.csv", rows)
    return rows


def _ablation_row(name: str, res: HedgeResult, ref: HedgeResult, cfg: WorldConfig, panel: PathPanel) -> dict:
    if name == "full":
        d_point = d_lo = d_hi = 0.0
    else:
        d = paired_delta(res, ref, cfg)
        d_point, d_lo, d_hi = d.point, d.ci_low, d.ci_high
    st = res.stats
    return {
        "variant": name, "delta_es": d_point, "ci_low": d_lo, "ci_high": d_hi,
        "delta_es_sign": int(np.sign(round(d_point, 12))),
        "es": var_es(losses_of(res), cfg.bootstrap.alpha)[1],
        "small_dv_trades": st.small_dv_trades, "dv_trades": st.dv_trades,
        "block_ratio": st.block_ratio, "ntb_ratio": st.ntb_ratio,
        "min_dv_gap": st.min_dv_gap if st.min_dv_gap is not None else -1,
        "vix_turnover": st.vix_turnover, "draws_sha256": panel.draws_sha256,
    }


# ---------------------------------------------------------------------------
# consolidated verification
# ---------------------------------------------------------------------------

@dataclass
class StudyOutcome:
    name: str
    passed: bool
    detail: str
    rows: list[dict] = field(default_factory=list)
    error: str = ""


def _study(name: str, fn: Callable[[], tuple[bool, str, list[dict]]]) -> StudyOutcome:
    from ._validation import InsufficientGridError
    from .verification import AuditError

    try:
        ok, detail, rows = fn()
        return StudyOutcome(name, bool(ok), detail, rows)
    except (InsufficientGridError, AuditError) as exc:
        return StudyOutcome(name, False, f"{type(exc).__name__}: {exc}", error=type(exc).__name__)


def verify_all(cfg: WorldConfig, *, out: str | Path | None = None, audit_seeds: int = 2,
               audit_paths: int = 25, telemetry_path: str | Path | None = None,
               strong_paths: int = 2000) -> list[StudyOutcome]:
    """Quadrature, strong order, Dupire consistency, coherence and run audits, in sequence."""
    from . import verification as V
    from .world import build_surface, strike_grid, vix_context

    surface = build_surface(cfg)
    teacher = surface.teacher_surface()
    strikes = strike_grid(cfg)
    ctx = vix_context(cfg, strikes)
    outcomes: list[StudyOutcome] = []

    def quad():
        rows, ok, parts = [], True, []
        for T in ctx.maturities:
            s = V.quadrature_convergence(surface, strikes, T, half_spread=cfg.vix.half_spread)
            rows += s.to_rows()
            ok &= s.passed
            parts.append(f"T={T * DAYS_PER_YEAR:.0f}d slope={s.fitted_slope:.3f}")
        return ok, "; ".join(parts), rows

    def strong():
        s = V.strong_order_study(V.smooth_test_vol, n_paths=strong_paths)
        return s.passed, f"order={s.fitted_slope:.3f}", s.to_rows()

    def dupire():
        b = V.dupire_bound_check(spot=cfg.spot, r=cfg.rate, q=cfg.div, strikes=strikes,
                                 maturities_days=cfg.maturities_days, chi_floor=cfg.localvol.chi_floor)
        return b["passed"], f"observed={b['observed_max']:.3g} bound={b['bound']:.3g}", [b]

    def coherence():
        ret = ctx.retained(surface)
        a, b = ctx.evaluate(surface, ret), ctx.evaluate(teacher, ret)
        resid = abs(a.vix_30 - b.vix_30)
        bnd = V.coherence_bound(surface, teacher, ctx, ret)
        row = {"residual": resid, **{k: float(v) for k, v in bnd.items()}}
        ok = resid <= bnd["bound"] and resid <= 1e-2
        return ok, f"residual={resid:.3g} bound={bnd['bound']:.3g} sharp={bnd['bound_sharp']:.3g}", [row]

    def audits():
        if telemetry_path is not None:
            recs = V.read_telemetry(telemetry_path)
        else:
            rep = run_pool(cfg, n_paths=audit_paths, n_seeds=audit_seeds, keep_telemetry=True)
            recs = rep.telemetry
        a = V.audit_run(recs)
        rows = [{"invariant": k, "violations": v} for k, v in a.counts.items()]
        return a.passed, f"paths={a.n_paths} violations={len(a.violations)}", rows

    for name, fn in (("quadrature", quad), ("strong_order", strong), ("dupire_consistency", dupire),
                     ("coherence", coherence), ("audits", audits)):
        t0 = time.perf_counter()
        o = _study(name, fn)
        logger.info("%s %s (%.1fs) %s", name, "PASS" if o.passed else "FAIL", time.perf_counter() - t0, o.detail)
        outcomes.append(o)
    if out is not None:
        run_dir = make_run_dir(out, cfg)
        for o in outcomes:
            if o.rows:
                write_csv(run_dir / "studies" / f"{o.name}.csv", o.rows)
        write_csv(run_dir / "report.csv",
                  [{"study": o.name, "passed": o.passed, "detail": o.detail} for o in outcomes])
    return outcomes
