#!/usr/bin/env python3
"""
FedCME simulator entry point

Thin wrapper around the command-line package so the simulator can be run
from a checkout with ``python main.py run --config ...``.
"""

import sys

from app.cli import main


if __name__ == "__main__":
    sys.exit(main())
