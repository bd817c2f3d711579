"""Command-line front end for running multi-arm federation experiments."""

from __future__ import annotations

import argparse
import dataclasses
import sys

from .harness import ARMS, ExperimentConfig, run_experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedseg",
        description=(
            "Run no-FL / FedAvg / adaptive-weight federation arms on synthetic "
            "multi-center segmentation data and write metric reports."
        ),
    )
    parser.add_argument("--config", help="JSON experiment config; flags override its fields")
    parser.add_argument(
        "--arm",
        action="append",
        choices=ARMS,
        help="arm to run (repeatable; default: all three)",
    )
    parser.add_argument("--seed", action="append", type=int, help="experiment seed (repeatable)")
    parser.add_argument("--out", help="output directory for reports and figures")
    parser.add_argument("--rounds", type=int, help="number of federation rounds")
    parser.add_argument("--scale", type=float, help="sample-count scale of the synthetic roster")
    parser.add_argument("--no-figures", action="store_true", help="skip figure rendering")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = (
            ExperimentConfig.from_json_file(args.config)
            if args.config
            else ExperimentConfig()
        )
        overrides = {}
        if args.arm:
            overrides["arms"] = tuple(args.arm)
        if args.seed:
            overrides["seeds"] = tuple(args.seed)
        if args.out:
            overrides["output_dir"] = args.out
        if args.rounds is not None:
            overrides["rounds"] = args.rounds
        if args.scale is not None:
            overrides["scale"] = args.scale
        if args.no_figures:
            overrides["figures"] = False
        if overrides:
            config = dataclasses.replace(config, **overrides)
        if config.output_dir is None:
            config = dataclasses.replace(config, output_dir="fedseg_out")
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    report = run_experiment(config)
    for seed in sorted(report.rows):
        for row in report.rows[seed]:
            if row.center == "average" and row.method in ARMS:
                hd = "n/a" if row.hd95 is None else f"{row.hd95:.4f}"
                print(
                    f"seed {seed} {row.method:>10}: dice {row.dice:.4f} "
                    f"jaccard {row.jaccard:.4f} hd95 {hd}"
                )
    for failure in report.failures:
        print(
            f"FAILED arm={failure['arm']} seed={failure['seed']}: {failure['error']}",
            file=sys.stderr,
        )
    print(f"report written to {report.output_dir}")
    return 0 if report.succeeded else 1


if __name__ == "__main__":
    sys.exit(main())
