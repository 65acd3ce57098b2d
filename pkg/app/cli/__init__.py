"""
Command-line surface: ``fedcme-sim run`` and ``fedcme-sim compare``
"""

import logging
import sys
from typing import List, Optional

from app.config import Config
from app.core.errors import ConfigurationError, FedSimError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_IO = 3


def configure_logging(level: Optional[str] = None):
    logging.basicConfig(
        level=(level or Config.LOG_LEVEL).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point; returns the process exit status"""
    from app.cli.parser import build_parser

    args = build_parser().parse_args(argv)
    try:
        Config.validate()
    except ValueError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    configure_logging(args.log_level)
    try:
        return args.handler(args)
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except FedSimError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
