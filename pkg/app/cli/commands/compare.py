"""
compare: mean and standard deviation of accuracy across metrics files
"""

import argparse

from app.core.metrics import format_summary, read_metrics, summarize


def register(subparsers):
    parser = subparsers.add_parser("compare", help="Summarise metrics CSVs per strategy")
    parser.add_argument("paths", nargs="+", help="Metrics CSV files")
    parser.add_argument("--target", type=float, default=None,
                        help="Also report the first round reaching this test accuracy")
    parser.set_defaults(handler=handle)


def handle(args: argparse.Namespace) -> int:
    runs = {path: read_metrics(path) for path in args.paths}
    print(format_summary(summarize(runs, args.target), args.target))
    return 0
