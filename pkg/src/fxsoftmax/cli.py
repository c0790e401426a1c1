"""Command-line entry point: one training run or the full comparison grid."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .data import IdxError, load_mnist
from .fixedpoint import RoundingMode
from .harness import (
    LR_SWEEP,
    TrainConfig,
    aggregate_table,
    emit_report,
    format_table,
    grid,
    run_with_sweep,
)
from .outputs import OutputVariant

log = logging.getLogger("fxsoftmax")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fxsoftmax",
        description="Train MNIST dense networks in simulated fixed point with softmax or ReLU outputs.",
    )
    p.add_argument("--layers", type=int, choices=(1, 2, 3), default=1)
    p.add_argument("--variant", choices=[v.value for v in OutputVariant], default="softmax")
    p.add_argument("--rounding", choices=[m.value for m in RoundingMode], default="prob")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=TrainConfig.learning_rate, help="learning rate")
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fraction-bits", type=int, default=16)
    p.add_argument("--total-bits", type=int, default=48)
    p.add_argument("--precision", choices=("fixed", "float"), default="fixed")
    p.add_argument("--train-limit", type=int, default=None, help="use only the first N training images")
    p.add_argument("--test-limit", type=int, default=None, help="use only the first N test images")
    p.add_argument("--data-dir", type=Path, default=None, help="IDX directory (default: $MNIST_DIR)")
    p.add_argument("--out", type=Path, default=None, help="write the per-epoch report here")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--grid", action="store_true", help="run every layers x rounding x variant cell")
    p.add_argument("--no-sweep", action="store_true", help="do not retry a diverged run at smaller learning rates")
    p.add_argument("-q", "--quiet", action="store_true")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def config_from_args(args) -> TrainConfig:
    return TrainConfig(
        layers=args.layers,
        variant=args.variant,
        rounding=args.rounding,
        epochs=args.epochs,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        seed=args.seed,
        fraction_bits=args.fraction_bits,
        total_bits=args.total_bits,
        precision=args.precision,
        train_limit=args.train_limit,
        test_limit=args.test_limit,
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        config = config_from_args(args)
    except ValueError as exc:
        print(f"fxsoftmax: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        train, test = load_mnist(args.data_dir)
    except (OSError, IdxError) as exc:
        print(f"fxsoftmax: cannot load MNIST: {exc}", file=sys.stderr)
        return EXIT_DATA

    if args.grid:
        results = grid(config, train, test, sweep=not args.no_sweep)
        print(format_table(aggregate_table(results)))
    else:
        result = run_with_sweep(config, train, test, divisors=(1,) if args.no_sweep else LR_SWEEP)
        results = [result]
        status = "diverged" if result.diverged else f"final test accuracy {result.final_accuracy:.4f}"
        print(f"{config.label()}: {status}")
    if args.out is not None:
        emit_report(results, args.out, args.format)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
