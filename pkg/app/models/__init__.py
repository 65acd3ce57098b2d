"""
Pydantic models for run configuration validation
"""

from .config import BlobsSpec, ClientConfig, DatasetSpec, IdxSpec, RunConfig, Strategy

__all__ = [
    "BlobsSpec",
    "ClientConfig",
    "DatasetSpec",
    "IdxSpec",
    "RunConfig",
    "Strategy",
]
