"""
Memory management utilities for long simulation runs
"""

import gc
import logging

import psutil

logger = logging.getLogger(__name__)


def get_memory_info():
    """Get current process memory usage"""
    process = psutil.Process()
    return {
        'cpu_memory_mb': process.memory_info().rss / 1024 / 1024,
        'cpu_memory_percent': process.memory_percent(),
    }


def log_memory(context: str):
    """Debug-level resident memory reading"""
    if logger.isEnabledFor(logging.DEBUG):
        info = get_memory_info()
        logger.debug(f"{context}: rss {info['cpu_memory_mb']:.1f} MB ({info['cpu_memory_percent']:.1f}%)")


def cleanup_memory():
    """Run garbage collection between runs"""
    try:
        collected = gc.collect()
        if collected > 0:
            logger.debug(f"Memory cleanup collected {collected} objects")
        return collected
    except Exception as e:
        logger.warning(f"Memory cleanup warning: {e}")
        return 0
