"""
Main argument parser combining all command modules
"""

import argparse

from app.cli.commands import compare, run
from app.core.version import get_version

COMMANDS = [run, compare]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedcme-sim",
        description="Federated learning simulator: FedCME, FedAvg, FedProx, FedRS",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {get_version()}")
    parser.add_argument("--log-level", default=None, type=str.upper,
                        choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"],
                        help="Override FEDSIM_LOG_LEVEL")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        command.register(subparsers)
    return parser
