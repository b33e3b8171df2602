"""Command-line entry points for the experiment harness.

Subcommands: train-teacher, distill, ablate, export-matrices. Each takes
--config <path> plus optional --seed and --out overrides. Exit codes:
0 success, 2 config error, 3 numeric failure, 4 accuracy floor unmet.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import harness
from .harness import (
    AccuracyFloorError,
    ConfigError,
    DistillConfig,
    NumericFailure,
    load_config,
)

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_FLOOR = 4


def _add_common(sub):
    sub.add_argument("--config", required=True, help="flat key/value config file")
    sub.add_argument("--seed", type=int, default=None, help="override config seed")
    sub.add_argument("--out", default=None, help="override config output_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emdistill",
        description="Teacher/student transformer distillation with "
        "transport-based layer mapping",
    )
    subs = parser.add_subparsers(dest="command", required=True)
    for name in ("train-teacher", "distill", "ablate", "export-matrices"):
        _add_common(subs.add_parser(name))
    return parser


def _load(args) -> tuple[DistillConfig, str]:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["output_dir"] = args.out
    config = load_config(args.config, overrides)
    return config, config.output_dir


def _resolve_teacher(config: DistillConfig, out_dir) -> str:
    if config.teacher_checkpoint:
        if not os.path.exists(config.teacher_checkpoint):
            raise ConfigError(
                f"teacher checkpoint not found: {config.teacher_checkpoint}"
            )
        return config.teacher_checkpoint
    candidate = os.path.join(out_dir, "teacher.npz")
    if os.path.exists(candidate):
        return candidate
    return harness.train_teacher(config, out_dir)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config, out_dir = _load(args)
        if args.command == "train-teacher":
            path = harness.train_teacher(config, out_dir)
            print(path)
        elif args.command == "distill":
            teacher = _resolve_teacher(config, out_dir)
            report = harness.distill(config, teacher, out_dir)
            print(
                f"final eval accuracy {report.summary['final_eval_acc']:.4f} "
                f"({out_dir}/metrics.jsonl)"
            )
        elif args.command == "ablate":
            teacher = _resolve_teacher(config, out_dir)
            comparison = harness.ablate(config, teacher, out_dir)
            for row in comparison["rows"]:
                print(f"{row['mode']:<12} eval_acc={row['final_eval_acc']:.4f}")
        elif args.command == "export-matrices":
            teacher = _resolve_teacher(config, out_dir)
            student = os.path.join(out_dir, "student.npz")
            if not os.path.exists(student):
                raise ConfigError(
                    f"student checkpoint not found: {student}; run distill first"
                )
            for path in harness.export_matrices(config, teacher, student, out_dir):
                print(path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except AccuracyFloorError as exc:
        print(f"accuracy floor unmet: {exc}", file=sys.stderr)
        return EXIT_FLOOR
    return 0


if __name__ == "__main__":
    sys.exit(main())
