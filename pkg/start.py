#!/usr/bin/env python3
"""
Development helper for the FedCME simulator

Convenient shortcuts for running test tiers and a small demo experiment.
"""

import argparse
import json
import subprocess
import sys
import tempfile
from pathlib import Path

DEMO_CONFIG = {
    "strategy": "fedcme",
    "k": 6,
    "m": 4,
    "t": 3,
    "local_epochs": 2,
    "dataset": {"kind": "blobs", "num_classes": 4, "dim": 8, "n_per_class": 40},
    "seed": 0,
}


def run_tests(extra):
    """Run the fast test suite"""
    print("🧪 Running test suite...")
    return subprocess.run([sys.executable, "-m", "pytest", "tests", *extra]).returncode


def run_slow_tests():
    """Run everything, including the scaled-down directional experiments"""
    print("🐢 Running full test suite (slow experiments included)...")
    return subprocess.run([sys.executable, "-m", "pytest", "tests", "--runslow", "-m", "slow"]).returncode


def run_demo():
    """Run a tiny FedCME experiment into a temporary directory"""
    print("🚀 Running demo experiment...")
    with tempfile.TemporaryDirectory() as tmp:
        config = dict(DEMO_CONFIG, output_path=str(Path(tmp) / "demo.csv"))
        config_path = Path(tmp) / "demo.json"
        config_path.write_text(json.dumps(config))
        code = subprocess.run([sys.executable, "main.py", "run", "--config", str(config_path)]).returncode
        if code == 0:
            print((Path(tmp) / "demo.csv").read_text())
        return code


def show_info():
    """Show version and project structure"""
    from app.core.version import get_version_info

    info = get_version_info()
    print(f"📦 {info.get('name', 'fedcme-sim')} {info['version']} (Python {info['python_version']}, {info['platform']})")
    print("📁 Project structure:")
    print("""
app/
├── config.py            # Environment configuration (FEDSIM_*)
├── models/config.py     # RunConfig / ClientConfig (pydantic)
├── core/
│   ├── nn.py            # Tensors, losses, analytic gradients, SGD
│   ├── split_model.py   # Extractor/classifier model, exchange, flattening
│   ├── data.py          # Blobs, IDX, Dirichlet partition, batching
│   ├── strategies.py    # FedAvg / FedProx / FedRS / FedCME local updates
│   ├── barrier.py       # Mid-training exchange rendezvous
│   ├── matching.py      # Client selection and matching
│   ├── aggregation.py   # Model, feature and eval-table aggregation
│   ├── orchestrator.py  # Rounds
│   ├── metrics.py       # CSV metrics and summaries
│   └── experiment.py    # Config parsing, run loop, sweeps
└── cli/                 # run / compare commands

tests/                   # pytest suite (--runslow for experiments)
main.py                  # Entry point
start.py                 # This development script
""")


def main():
    parser = argparse.ArgumentParser(description="FedCME simulator development helper")
    parser.add_argument("command", choices=["test", "test-slow", "demo", "info"], help="Command to execute")
    args, extra = parser.parse_known_args()

    if args.command == "test":
        return run_tests(extra)
    elif args.command == "test-slow":
        return run_slow_tests()
    elif args.command == "demo":
        return run_demo()
    elif args.command == "info":
        show_info()
    return 0


if __name__ == "__main__":
    sys.exit(main())
