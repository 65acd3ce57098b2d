"""
Core simulation engine: numeric kernel, split model, data, strategies and the server
"""

from .errors import (
    ConfigurationError,
    DimensionError,
    ExchangeProtocolError,
    FedSimError,
    RoundAbortedError,
    ValidationError,
)
from .memory import cleanup_memory, get_memory_info
from .version import get_version, get_version_info

__all__ = [
    "ConfigurationError",
    "DimensionError",
    "ExchangeProtocolError",
    "FedSimError",
    "RoundAbortedError",
    "ValidationError",
    "cleanup_memory",
    "get_memory_info",
    "get_version",
    "get_version_info",
]
