"""Command-line entry point.

    fluxlattice [--config run.yaml] [--seed N] [--out DIR] [--jobs N] <stage>

Stages run in order synth, preprocess, cluster, train, predict, evaluate,
report; ``run`` executes all of them. Exit status is 0 on success, 2 on
invalid input or configuration, 3 when an upstream artifact is missing.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .errors import FluxLatticeError, StageDependencyError, ValidationError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DEPENDENCY = 3
EXIT_OTHER = 1


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fluxlattice", description="Cluster-then-regress study of axial flux profiles.")
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=_u64, help="override the run seed")
    p.add_argument("--out", default="run", help="run directory (default: ./run)")
    p.add_argument("--jobs", type=_positive, default=1, help="worker processes for train/predict")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("stage", choices=[*pipeline.STAGES, "run"])
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = pipeline.load_config(args.config) if args.config else pipeline.RunConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        run = pipeline.Run(args.out, cfg)
        if args.stage == "run":
            result = pipeline.run_all(run, args.jobs)
            result = {"report": result["report"]["evaluation"]}
        else:
            result = pipeline.run_stage(args.stage, run, args.jobs)
    except StageDependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FluxLatticeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
