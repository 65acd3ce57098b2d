"""
run: execute one configured experiment, or a seed sweep
"""

import argparse
import re
from typing import List

from app.config import Config
from app.core.errors import ConfigurationError
from app.core.experiment import ExperimentResult, parse_config, run_experiment, run_sweep

SWEEP_PATTERN = re.compile(r"^seeds=(\d+)\.\.(\d+)$")


def register(subparsers):
    parser = subparsers.add_parser("run", help="Run an experiment from a JSON config")
    parser.add_argument("--config", required=True, help="Path to the JSON run configuration")
    parser.add_argument("--workers", type=int, default=Config.DEFAULT_WORKERS,
                        help="Clients trained concurrently (does not change results)")
    parser.add_argument("--sweep", default=None, help="Seed range, e.g. seeds=1..5")
    parser.set_defaults(handler=handle)


def parse_sweep(spec: str) -> List[int]:
    """'seeds=a..b' -> [a, ..., b]"""
    match = SWEEP_PATTERN.match(spec.strip())
    if not match:
        raise ConfigurationError(f"expected seeds=a..b, got '{spec}'", key_path="--sweep")
    first, last = int(match.group(1)), int(match.group(2))
    if last < first:
        raise ConfigurationError(f"empty seed range {first}..{last}", key_path="--sweep")
    return list(range(first, last + 1))


def _summary_line(result: ExperimentResult) -> str:
    cfg = result.config
    return (f"{cfg.strategy.value} seed={cfg.seed}: final test_acc={result.final_accuracy:.4f} "
            f"after {cfg.t} rounds -> {result.metrics_path}")


def handle(args: argparse.Namespace) -> int:
    if args.workers < 1:
        raise ConfigurationError(f"must be at least 1, got {args.workers}", key_path="--workers")
    cfg = parse_config(args.config)
    if args.sweep:
        for result in run_sweep(cfg, parse_sweep(args.sweep), workers=args.workers):
            print(_summary_line(result))
    else:
        print(_summary_line(run_experiment(cfg, workers=args.workers)))
    return 0
