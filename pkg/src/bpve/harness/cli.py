"""Command line entry point: ``bpve <subcommand> [options]``."""

from __future__ import annotations

import argparse
import sys

from bpve.errors import DegenerateEnvironmentError, DomainError, HypothesisViolationError
from bpve.harness.config import ExperimentConfig
from bpve.harness.experiments import run_experiment

SUBCOMMANDS = {
    "validate-env": "validate_env",
    "simulate": "simulate",
    "survival": "survival",
    "yaglom": "yaglom",
    "reduced": "reduced",
    "split-times": "split_times",
    "cpp-sample": "cpp_sample",
    "cpp-moments": "cpp_moments",
    "many-to-few-check": "many_to_few_check",
    "multiple-mergers": "multiple_mergers",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bpve", description="Branching processes in varying environment: "
                                     "simulation and checks against limit laws.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, kind in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=f"run the {kind} experiment")
        p.add_argument("--config", help="experiment config (YAML or JSON)")
        p.add_argument("--seed", type=int, help="base seed (non-negative integer)")
        p.add_argument("--reps", type=int, help="number of replicates")
        p.add_argument("--parallelism", type=int, help="worker processes")
        p.add_argument("--out-dir", help="directory for report.json, raw.csv and plot_*.csv")
        p.add_argument("--n", type=int, action="append", help="scale N (repeatable; overrides the config)")
        p.add_argument("--t", type=float, help="horizon t")
        p.add_argument("--assert", dest="assert_", action="store_true",
                       help="exit with status 2 when a comparison fails")
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    kind = SUBCOMMANDS[args.command]
    if args.config:
        cfg = ExperimentConfig.load_mapping(args.config)
        cfg["kind"] = kind
    else:
        cfg = {"kind": kind}
    overrides = {"seed": args.seed, "reps": args.reps, "parallelism": args.parallelism,
                 "out_dir": args.out_dir, "N": args.n, "t": args.t}
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    if cfg.get("seed", 0) < 0:
        raise DomainError("seed must be non-negative")
    return ExperimentConfig.from_dict(cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        report = run_experiment(cfg)
    except (DomainError, HypothesisViolationError, DegenerateEnvironmentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for est in report.estimates:
        print("estimate", est)
    for c in report.comparisons:
        status = {True: "PASS", False: "FAIL", None: "INFO"}[c.passed]
        stat = "" if c.statistic is None else f" statistic={c.statistic:.6g}"
        pval = "" if c.p_value is None else f" p={c.p_value:.4g}"
        print(f"{status} {c.name}{stat}{pval} [{c.source}]")
    for note in report.notes:
        print("note", note)
    if cfg.out_dir:
        print(f"wrote {', '.join(report.files)} to {cfg.out_dir}")
    if args.assert_ and not report.passed:
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
