"""Command-line experiment runner.

Each subcommand executes one named experiment. Values come from an optional
TOML config file; command-line flags override file values. All artifacts are
CSV/JSON under --out and are byte-stable for a fixed (config, seed).
"""
from __future__ import annotations

import argparse
import json
import sys

from .experiments import EXPERIMENTS, ExperimentConfig, run_experiment


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file; flags override its values")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--geometry", default=None, help="geometry preset name")
    p.add_argument("--noise-rate", type=float, default=None, dest="noise_rate",
                   help="background accesses per simulated ms per set")
    p.add_argument("--algorithm", default=None, help="gt | gtop | ps | psop | bins")
    p.add_argument("--scope", default=None, help="single | page-offset | whole-sys")
    p.add_argument("--replicas", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--no-filtering", action="store_true", help="disable candidate filtering")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="probelab",
        description="Prime+Probe attack laboratory on a simulated non-inclusive cache hierarchy",
    )
    sub = parser.add_subparsers(dest="experiment", required=True, metavar="|".join(EXPERIMENTS))
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        _add_common(p)
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    overrides = dict(
        experiment=args.experiment,
        seed=args.seed,
        geometry=args.geometry,
        noise_rate=args.noise_rate,
        algorithm=args.algorithm,
        scope=args.scope,
        replicas=args.replicas,
        out=args.out,
    )
    if args.no_filtering:
        overrides["filtering"] = False
    return cfg.override(**overrides)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        summary = run_experiment(cfg)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    json.dump(summary, sys.stdout, indent=2, sort_keys=True, default=str)
    print()
    return 0


if __name__ == "__main__":
    sys.exit(main())
