"""carand command line: simulate, oracle, verify, classify."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import keys as K
from .config import ConfigError, PRESET_NAMES, RunConfig, load_config, preset
from .engine import run_trial, write_trajectories_csv
from .montecarlo import (
    build_report,
    classify_regimes,
    derive_stream,
    simulate_many,
)
from .oracle import StateSpaceError, exact_moment, parse_statistic, propagate
from .summary import write_summary_csv


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="carand",
        description="Covariate-adaptive randomization: simulation, exact analysis, "
        "and balance verification.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument(
        "--preset", choices=PRESET_NAMES, help="named design preset instead of --config"
    )
    common.add_argument(
        "--levels",
        help="covariate levels for --preset, comma separated (default 2,2)",
    )
    common.add_argument("--out-dir", help="output directory (default from config)")
    common.add_argument("--seed", type=int, help="master seed override")
    common.add_argument(
        "--workers",
        type=int,
        help="parallel workers (default CARAND_WORKERS or config value)",
    )

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="run replications, write CSVs")
    orc = sub.add_parser("oracle", parents=[common], help="exact moment table")
    orc.add_argument("--n", type=int, required=True, help="propagate up to n patients")
    orc.add_argument(
        "--stat",
        required=True,
        help='statistic, e.g. "abs_overall", "abs_margin:1;2", "abs_stratum:1;1"',
    )
    orc.add_argument("--r", type=float, default=1.0, help="moment order (default 1)")
    sub.add_parser("verify", parents=[common], help="simulate and check regimes")
    sub.add_parser("classify", parents=[common], help="print regime predictions")
    return parser


def _resolve_config(args) -> RunConfig:
    if args.config and args.preset:
        raise ConfigError(["give either --config or --preset, not both"])
    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        levels = (
            tuple(int(v) for v in args.levels.split(",")) if args.levels else (2, 2)
        )
        cfg = preset(args.preset, levels)
    else:
        raise ConfigError(["one of --config or --preset is required"])
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    elif os.environ.get("CARAND_WORKERS"):
        cfg.workers = int(os.environ["CARAND_WORKERS"])
    if args.out_dir:
        cfg.out_dir = args.out_dir
    return cfg


def dispatch(subcommand: str, cfg: RunConfig, oracle_args=None) -> int:
    handlers = {
        "simulate": _cmd_simulate,
        "verify": _cmd_verify,
        "classify": _cmd_classify,
    }
    if subcommand == "oracle":
        return _cmd_oracle(cfg, *oracle_args)
    return handlers[subcommand](cfg)


def _outdir(cfg: RunConfig) -> Path:
    path = Path(cfg.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _cmd_simulate(cfg: RunConfig) -> int:
    summary = simulate_many(
        cfg.design,
        cfg.n_grid,
        cfg.replications,
        cfg.seed,
        cfg.workers,
        retained_strata=cfg.retained_strata,
    )
    out = _outdir(cfg)
    with open(out / "summary.csv", "w", encoding="utf-8", newline="") as f:
        write_summary_csv(summary, f)
    reps = min(cfg.trajectory_reps, cfg.replications)
    trajectories = [
        run_trial(
            cfg.design,
            cfg.n_grid[-1],
            cfg.n_grid,
            derive_stream(cfg.seed, rid),
            master_seed=cfg.seed,
            replication_id=rid,
        )
        for rid in range(reps)
    ]
    with open(out / "trajectories.csv", "w", encoding="utf-8", newline="") as f:
        write_trajectories_csv(trajectories, f, digest=cfg.design.digest(), seed=cfg.seed)
    print(f"wrote {out / 'summary.csv'} and {out / 'trajectories.csv'}")
    return 0


def _cmd_oracle(cfg: RunConfig, n: int, stat_text: str, r: float) -> int:
    try:
        statistic = parse_statistic(stat_text, cfg.design.spec, cfg.design.arms)
        dists = propagate(cfg.design, n)
    except (StateSpaceError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    lines = ["n,stat,r,value"]
    for step in range(1, n + 1):
        value = exact_moment(dists[step], statistic, r)
        lines.append(f"{step},{statistic.label(cfg.design.spec)},{r:g},{value:.12g}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if cfg.out_dir:
        out = _outdir(cfg)
        (out / "oracle.csv").write_text(
            f"# design={cfg.design.digest()} seed={cfg.seed}\n" + text, encoding="utf-8"
        )
    return 0


def _cmd_classify(cfg: RunConfig) -> int:
    prediction = classify_regimes(cfg.design)
    print(f"{'scope':8} {'index':12} {'prediction':10} justification")
    for (scope, index), pred in prediction.entries.items():
        label = K.index_label(scope, index, cfg.design.arms) or "-"
        print(f"{scope:8} {label:12} {pred.label:10} {pred.tag}")
    out = _outdir(cfg)
    with open(out / "classify.csv", "w", encoding="utf-8", newline="") as f:
        f.write(f"# design={cfg.design.digest()} seed={cfg.seed}\n")
        f.write("scope,index,prediction,justification\n")
        for (scope, index), pred in prediction.entries.items():
            label = K.index_label(scope, index, cfg.design.arms)
            f.write(f"{scope},{label},{pred.label},{pred.tag}\n")
    return 0


def _cmd_verify(cfg: RunConfig) -> int:
    if len(cfg.n_grid) < 2 or cfg.n_grid[-1] < 2 * cfg.n_grid[0]:
        print(
            "error: verification needs n_grid with two checkpoints of ratio >= 2",
            file=sys.stderr,
        )
        return 2
    summary = simulate_many(
        cfg.design,
        cfg.n_grid,
        cfg.replications,
        cfg.seed,
        cfg.workers,
        retained_strata=cfg.retained_strata,
    )
    prediction = classify_regimes(cfg.design)
    report = build_report(cfg.design, summary, prediction, cfg.tolerances)
    out = _outdir(cfg)
    with open(out / "report.csv", "w", encoding="utf-8", newline="") as f:
        report.to_csv(f, digest=cfg.design.digest(), seed=cfg.seed)
    print(report.format_text())
    print(f"wrote {out / 'report.csv'}")
    return 0 if report.passed else 1


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args)
    except ConfigError as exc:
        for line in exc.errors:
            print(f"config error: {line}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    oracle_args = (args.n, args.stat, args.r) if args.command == "oracle" else None
    return dispatch(args.command, cfg, oracle_args)


if __name__ == "__main__":
    sys.exit(main())
