import dataclasses
import math

import numpy as np
import pytest

from tailsafe.cli import main
from tailsafe.controller import ControllerParams, baseline_params
from tailsafe.dynamics import PathPanel
from tailsafe.harness import (ABLATION_TOGGLES, REPORT_COLUMNS, ablation_params, controller_params, losses_of,
                              pool_rows, run_ablation, run_pool, run_scenario_grid, simulate_panel, verify_all)
from tailsafe.hedging import run_hedge
from tailsafe.market_shell import FlatVolSource
from tailsafe.risk_metrics import paired_bootstrap_delta_es

SMALL = {"n_paths": 6, "n_seeds": 2}


@pytest.fixture(scope="module")
def panel(world):
    return simulate_panel(world, **SMALL)


def test_zero_vol_world_has_zero_pnl(cfg, world):
    c = cfg.with_overrides(hedge={"impact_cash_scale": 0.0})
    flat = FlatVolSource(0.0, world.spot, 0.0, 0.0)
    w0 = dataclasses.replace(world, config=c, teacher=flat, kappa=lambda T: 0.0)
    n = w0.sim.n_steps + 1
    S = np.full((2, 3, n), world.spot)
    vix = np.full((2, 3, n), 18.0)
    p = PathPanel([0, 1], S, np.zeros_like(S), vix, np.arange(n) * w0.sim.dt, 0, "flat")
    res = run_hedge(w0, controller_params(c), p)
    assert np.all(res.pnl == 0.0)
    rows = {r["metric"]: r for r in pool_rows(res, c)}
    for name in ("mean", "std", "VaR_97.5", "ES_97.5"):
        assert rows[name]["point"] == rows[name]["ci_low"] == rows[name]["ci_high"] == 0.0
    assert 0.0 <= rows["NTB_ratio"]["point"] <= 1.0


def test_report_shape(cfg, world, panel):
    rep = run_pool(cfg, world=world, panel=panel)
    names = [r["metric"] for r in rep.rows]
    assert names[:4] == ["mean", "std", "VaR_97.5", "ES_97.5"]
    assert {"NTB_ratio", "gate_block_ratio"} <= set(names)
    for r in rep.rows:
        assert set(REPORT_COLUMNS) <= set(r) and r["config_hash"] == cfg.config_hash()
    es = rep.metric("ES_97.5")
    assert rep.metric("VaR_97.5") <= es
    assert 0.0 <= rep.metric("NTB_ratio") <= 1.0


def test_identical_config_identical_report(cfg, tmp_path):
    a = run_pool(cfg, out=tmp_path / "a", **SMALL)
    b = run_pool(cfg, out=tmp_path / "b", **SMALL)
    assert repr(a.rows) == repr(b.rows) and a.draws_sha256 == b.draws_sha256
    assert (a.run_dir / "report.csv").read_bytes() == (b.run_dir / "report.csv").read_bytes()
    assert (a.run_dir / "constants.csv").read_bytes() == (b.run_dir / "constants.csv").read_bytes()
    for name in ("report.csv", "telemetry.jsonl", "constants.csv", "config.yaml"):
        assert (a.run_dir / name).is_file()
    assert (a.run_dir / "studies").is_dir()
    assert a.run_dir.name.startswith(cfg.config_hash())


def test_identical_controllers_zero_delta(cfg):
    p = controller_params(cfg)
    rows = run_scenario_grid(cfg, xi_values=[0.5], rho_values=[-0.6], seeds_per_cell=1, paths_per_seed=8,
                             safe=p, baseline=p)
    assert rows[0]["delta_es"] == rows[0]["ci_low"] == rows[0]["ci_high"] == 0.0


def test_one_cell_grid_is_paired_bootstrap(cfg):
    from tailsafe.harness import cell_config
    from tailsafe.world import build_world

    rows = run_scenario_grid(cfg, xi_values=[0.4], rho_values=[-0.3], seeds_per_cell=2, paths_per_seed=8)
    c = cell_config(cfg, 0.4, -0.3)
    w = build_world(c)
    pnl_panel = simulate_panel(w, n_paths=8, n_seeds=2)
    full = controller_params(cfg)
    a, b = run_hedge(w, full, pnl_panel), run_hedge(w, baseline_params(full), pnl_panel)
    bs = cfg.bootstrap
    d = paired_bootstrap_delta_es(losses_of(a), losses_of(b), bs.alpha, bs.paired_resamples, bs.seed)
    assert (rows[0]["delta_es"], rows[0]["ci_low"], rows[0]["ci_high"]) == (d.point, d.ci_low, d.ci_high)
    assert rows[0]["draws_sha256"] == pnl_panel.draws_sha256


def test_ablation_toggles_change_one_switch():
    full = ControllerParams()
    expected = {"fix_w_vix": "dynamic_weight", "remove_guards": "use_guards",
                "no_micro_thresholds": "use_thresholds", "no_cooldown": "use_cooldown",
                "zero_cross_term": "alpha_cross"}
    for t in ABLATION_TOGGLES:
        v = ablation_params(full, t)
        diff = [f.name for f in dataclasses.fields(full) if getattr(full, f.name) != getattr(v, f.name)]
        assert diff == [expected[t]]
    with pytest.raises(ValueError):
        ablation_params(full, "nope")


def test_noop_toggle_gives_zero_delta(cfg):
    full = dataclasses.replace(controller_params(cfg), alpha_cross=0.0)
    rows = run_ablation(cfg, toggles=("zero_cross_term",), full=full, n_paths=6, n_seeds=1)
    row = rows[1]
    assert row["variant"] == "zero_cross_term"
    assert row["delta_es"] == 0.0 and row["delta_es_sign"] == 0
    assert len({r["draws_sha256"] for r in rows}) == 1


def test_no_cooldown_allows_consecutive_dv(cfg):
    rows = {r["variant"]: r for r in run_ablation(cfg, toggles=("no_cooldown",), n_paths=20, n_seeds=1)}
    full = controller_params(cfg)
    assert rows["full"]["min_dv_gap"] == -1 or rows["full"]["min_dv_gap"] >= full.cooldown_steps + 1
    assert rows["no_cooldown"]["min_dv_gap"] == 1


def test_verify_flags_coarse_grid(cfg):
    coarse = cfg.with_overrides(strikes={"count": 5})
    out = {o.name: o for o in verify_all(coarse, audit_seeds=1, audit_paths=2, strong_paths=200)}
    assert not out["quadrature"].passed
    assert out["quadrature"].error == "InsufficientGridError"


# CLI

def test_cli_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("cir:\n  xi: -1.0\n")
    assert main(["pool", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "cir.xi" in capsys.readouterr().err


def test_cli_verify_passes(tmp_path, capsys):
    code = main(["verify", "--out", str(tmp_path), "--paths", "4", "--seeds", "1"])
    out = capsys.readouterr().out
    assert code == 0, out
    assert out.count("PASS") == 5


def test_cli_verify_corrupted_telemetry(tmp_path, capsys):
    t = tmp_path / "telemetry.jsonl"
    t.write_text('{"step_index": 0}\n{broken\n')
    code = main(["verify", "--out", str(tmp_path), "--telemetry", str(t), "--paths", "4", "--seeds", "1"])
    out = capsys.readouterr().out
    assert code == 1
    assert "FAIL  audits" in out and "AuditError" in out


def test_cli_pool_writes_layout(tmp_path):
    assert main(["pool", "--out", str(tmp_path), "--paths", "3", "--seeds", "1", "--seed", "5"]) == 0
    (run,) = list(tmp_path.iterdir())
    assert {p.name for p in run.iterdir()} >= {"report.csv", "telemetry.jsonl", "constants.csv", "studies"}
    header = (run / "report.csv").read_text().splitlines()[0]
    assert header.split(",") == list(REPORT_COLUMNS)
