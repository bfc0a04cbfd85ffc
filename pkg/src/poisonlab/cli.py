"""Command-line entry point.

Subcommands: gen-data, run, sweep, defense-calibrate, defense-eval, report,
schema-check. Exit codes: 0 success, 1 run failure, 2 config error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from . import runner
from .config import ExperimentPlan, load_config, parse_config
from .errors import ConfigError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poisonlab",
                                     description="Single-task poisoning lab for "
                                                 "class-incremental continual learning")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=False, help="experiment config file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--workers", type=int, default=None, help="parallel run workers")
        p.add_argument("--seed-offset", type=int, default=0, help="shift every run seed")

    p = sub.add_parser("gen-data", help="write the synthetic pool to IDX or CSV files")
    add_common(p)
    p.add_argument("--format", choices=("idx", "csv"), default="idx")

    p = sub.add_parser("run", help="clean and poisoned runs per seed, with reports")
    add_common(p)

    p = sub.add_parser("sweep", help="grid over one attack/method axis")
    add_common(p)
    p.add_argument("--axis", required=True, choices=runner.SWEEP_AXES)
    p.add_argument("--values", default=None,
                   help="comma-separated axis values (defaults per axis)")

    p = sub.add_parser("defense-calibrate", help="calibrate the threshold angle")
    add_common(p)

    p = sub.add_parser("defense-eval", help="clean/poisoned task mix detection metrics")
    add_common(p)

    p = sub.add_parser("report", help="rebuild aggregate report and plot data from artifacts")
    add_common(p, needs_config=False)

    p = sub.add_parser("schema-check", help="validate emitted CSV files against their schemas")
    add_common(p, needs_config=False)
    return parser


_DEFAULT_CONFIG = "[stream]\n[method]\n"


def _load_plan(args) -> ExperimentPlan:
    if getattr(args, "config", None):
        plan = load_config(args.config)
    else:
        plan = parse_config(_DEFAULT_CONFIG)
    if args.seed_offset:
        plan = replace(plan, seeds=tuple(s + args.seed_offset for s in plan.seeds))
    if args.workers is not None:
        plan = replace(plan, workers=args.workers)
    if args.out is not None:
        plan = replace(plan, out=args.out)
    return plan


def _out_dir(args, plan=None) -> str:
    if args.out:
        return args.out
    if plan is not None and plan.out:
        return plan.out
    return "results"


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "gen-data":
            plan = _load_plan(args)
            runner.cmd_gen_data(plan, _out_dir(args, plan), fmt=args.format)
        elif args.command == "run":
            plan = _load_plan(args)
            runner.cmd_run(plan, _out_dir(args, plan))
        elif args.command == "sweep":
            plan = _load_plan(args)
            if args.values:
                values = [float(v) for v in args.values.split(",") if v.strip()]
            else:
                values = list(runner.DEFAULT_AXIS_VALUES.get(args.axis, ()))
                if args.axis == "p_position":
                    values = list(range(len(plan.stream.task_class_counts)))
            runner.cmd_sweep(plan, args.axis, values, _out_dir(args, plan))
        elif args.command == "defense-calibrate":
            plan = _load_plan(args)
            runner.cmd_defense_calibrate(plan, _out_dir(args, plan))
        elif args.command == "defense-eval":
            plan = _load_plan(args)
            runner.cmd_defense_eval(plan, _out_dir(args, plan))
        elif args.command == "report":
            runner.cmd_report(_out_dir(args))
        elif args.command == "schema-check":
            problems = runner.schema_check(_out_dir(args))
            for problem in problems:
                print(problem, file=sys.stderr)
            return 1 if problems else 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
