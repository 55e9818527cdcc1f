"""Command-line entry point: ``tailsafe <subcommand> --config world.yaml --out out/``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, WorldConfig, dump_config, load_config

logger = logging.getLogger("tailsafe")

COMMANDS = ("validate", "vix", "localvol", "simulate", "pool", "grid", "ablate", "verify")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tailsafe", description="VIX-aware hedging world: build, run, verify.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, default=None, help="YAML world config (defaults built in)")
        s.add_argument("--seed", type=int, default=None, help="base seed override")
        s.add_argument("--out", type=Path, default=Path("out"), help="output root directory")
        s.add_argument("--paths", type=int, default=None, help="paths per seed")
        s.add_argument("--seeds", type=int, default=None, help="number of seeds")
        if name == "ablate":
            s.add_argument("--xi", type=float, default=None)
            s.add_argument("--rho", type=float, default=None)
            s.add_argument("--baseline", action="store_true", help="also run the guards-off baseline")
        if name == "verify":
            s.add_argument("--telemetry", type=Path, default=None, help="audit an existing telemetry file")
    return p


def _config(args) -> WorldConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides(sim={"base_seed": args.seed})
    if args.paths is not None:
        cfg = cfg.with_overrides(sim={"n_paths": args.paths}, grid={"paths_per_seed": args.paths})
    if args.seeds is not None:
        cfg = cfg.with_overrides(sim={"n_seeds": args.seeds}, grid={"seeds_per_cell": args.seeds})
    return cfg


def _print_rows(rows, keys) -> None:
    print("\t".join(keys))
    for r in rows:
        print("\t".join(f"{r[k]:.6g}" if isinstance(r[k], float) else str(r[k]) for k in keys))


def cmd_validate(cfg: WorldConfig, args) -> int:
    from .market_shell import validate_no_arbitrage
    from .world import build_surface

    surface = build_surface(cfg)
    print(validate_no_arbitrage(surface).to_text())
    print(f"config_hash {cfg.config_hash()}")
    return 0


def cmd_vix(cfg: WorldConfig, args) -> int:
    from .harness import make_run_dir, write_csv
    from .verification import coherence_bound
    from .world import build_surface, vix_context

    surface = build_surface(cfg)
    teacher = surface.teacher_surface()
    ctx = vix_context(cfg)
    ret = ctx.retained(surface)
    a, b = ctx.evaluate(surface, ret), ctx.evaluate(teacher, ret)
    bound = coherence_bound(surface, teacher, ctx, ret)
    row = {"vix_surface": a.vix_30, "vix_teacher": b.vix_30, "residual": abs(a.vix_30 - b.vix_30),
           "bound": float(bound["bound"]), "bound_sharp": float(bound["bound_sharp"]),
           "eps_shape": bound["eps_shape"], "config_hash": cfg.config_hash()}
    _print_rows([row], list(row))
    run_dir = make_run_dir(args.out, cfg)
    write_csv(run_dir / "report.csv", [row])
    return 0


def cmd_localvol(cfg: WorldConfig, args) -> int:
    from .harness import make_run_dir, write_csv
    from .world import build_world

    world = build_world(cfg)
    lv = world.local_vol
    run_dir = make_run_dir(args.out, cfg)
    write_csv(run_dir / "studies" / "local_vol.csv", lv.to_rows())
    print(f"local vol grid {lv.nodes.shape} clipped={int(lv.clip_mask.sum())} -> {run_dir}")
    return 0


def cmd_simulate(cfg: WorldConfig, args) -> int:
    from .harness import make_run_dir, simulate_panel, write_csv
    from .world import build_world

    world = build_world(cfg)
    panel = simulate_panel(world)
    run_dir = make_run_dir(args.out, cfg)
    write_csv(run_dir / "studies" / "paths.csv", list(panel.to_rows()))
    print(f"panel {panel.shape} truncations={panel.truncations} draws={panel.draws_sha256[:16]} -> {run_dir}")
    return 0


def cmd_pool(cfg: WorldConfig, args) -> int:
    from .harness import run_pool

    rep = run_pool(cfg, out=args.out)
    _print_rows(rep.rows, ["metric", "point", "ci_low", "ci_high"])
    print(f"-> {rep.run_dir}")
    return 0


def cmd_grid(cfg: WorldConfig, args) -> int:
    from .harness import run_scenario_grid

    rows = run_scenario_grid(cfg, out=args.out)
    _print_rows(rows, ["xi", "rho", "delta_es", "ci_low", "ci_high"])
    return 0


def cmd_ablate(cfg: WorldConfig, args) -> int:
    from .harness import run_ablation

    rows = run_ablation(cfg, xi=args.xi, rho=args.rho, include_baseline=args.baseline, out=args.out)
    _print_rows(rows, ["variant", "delta_es", "small_dv_trades", "block_ratio", "min_dv_gap"])
    return 0


def cmd_verify(cfg: WorldConfig, args) -> int:
    from .harness import verify_all

    kw = {}
    if args.paths is not None:
        kw["audit_paths"] = args.paths
    if args.seeds is not None:
        kw["audit_seeds"] = args.seeds
    outcomes = verify_all(cfg, out=args.out, telemetry_path=args.telemetry, **kw)
    for o in outcomes:
        print(f"{'PASS' if o.passed else 'FAIL'}  {o.name:<20} {o.detail}")
    return 0 if all(o.passed for o in outcomes) else 1


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.command == "validate" and args.verbose:
        print(dump_config(cfg))
    return globals()[f"cmd_{args.command}"](cfg, args)


if __name__ == "__main__":
    sys.exit(main())
