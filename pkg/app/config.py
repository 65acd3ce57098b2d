"""
Configuration management for the FedCME simulator
"""

import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()


class Config:
    """Process-level configuration class"""

    # Output settings
    OUTPUT_DIR = os.getenv('FEDSIM_OUTPUT_DIR', './results')

    # Execution settings
    DEFAULT_WORKERS = int(os.getenv('FEDSIM_WORKERS', 1))
    TORCH_THREADS = int(os.getenv('FEDSIM_TORCH_THREADS', 1))
    BARRIER_TIMEOUT = float(os.getenv('FEDSIM_BARRIER_TIMEOUT', 300))

    # Numeric checks
    CHECKED_MODE = os.getenv('FEDSIM_CHECKED', 'true').lower() == 'true'

    # Logging
    LOG_LEVEL = os.getenv('FEDSIM_LOG_LEVEL', 'INFO').upper()

    @classmethod
    def validate(cls):
        """Validate configuration values"""
        if cls.DEFAULT_WORKERS <= 0:
            raise ValueError(f"FEDSIM_WORKERS must be positive, got {cls.DEFAULT_WORKERS}")
        if cls.TORCH_THREADS <= 0:
            raise ValueError(f"FEDSIM_TORCH_THREADS must be positive, got {cls.TORCH_THREADS}")
        if cls.BARRIER_TIMEOUT <= 0:
            raise ValueError(f"FEDSIM_BARRIER_TIMEOUT must be positive, got {cls.BARRIER_TIMEOUT}")
        if cls.LOG_LEVEL not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            raise ValueError(f"FEDSIM_LOG_LEVEL must be a logging level name, got {cls.LOG_LEVEL}")
        if not cls.OUTPUT_DIR:
            raise ValueError("FEDSIM_OUTPUT_DIR must not be empty")
