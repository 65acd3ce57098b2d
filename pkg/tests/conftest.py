"""
Pytest configuration file with shared fixtures and utilities for the simulator tests
"""

import os
import sys
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import pytest
import torch

# Add project root to path
PROJECT_ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(PROJECT_ROOT))

from app.core.data import Dataset, generate_blobs  # noqa: E402
from app.core.nn import DTYPE  # noqa: E402
from app.core.seeding import torch_generator  # noqa: E402
from app.core.split_model import SplitModel, build_split_model  # noqa: E402
from app.core.strategies import ClientData, LocalTask  # noqa: E402
from app.models.config import ClientConfig, RunConfig, Strategy  # noqa: E402

# Test configuration
GRAD_TOLERANCE = float(os.getenv("FEDSIM_TEST_GRAD_TOL", "1e-5"))
SMALL_RUN: Dict[str, Any] = {
    "k": 10,
    "m": 4,
    "t": 10,
    "local_epochs": 2,
    "batch_size": 16,
    "lr": 0.05,
    "dirichlet_alpha": 0.5,
    "dataset": {"kind": "blobs", "num_classes": 4, "dim": 6, "n_per_class": 40, "spread": 0.5},
    "hidden_dims": [8, 6],
    "seed": 3,
}


@pytest.fixture
def generator() -> torch.Generator:
    return torch_generator(1234)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def blobs() -> Dataset:
    """Four well separated classes in six dimensions"""
    return generate_blobs(num_classes=4, dim=6, n_per_class=30, spread=0.3, seed=7, center_scale=3.0)


@pytest.fixture
def small_model(generator) -> SplitModel:
    return build_split_model(6, [5, 4], 4, generator)


@pytest.fixture
def client_config() -> ClientConfig:
    return ClientConfig(lr=0.05, local_epochs=2, batch_size=8)


@pytest.fixture
def run_config_dict() -> Dict[str, Any]:
    """A fresh copy of the small blobs run"""
    return {**SMALL_RUN, "dataset": dict(SMALL_RUN["dataset"]), "hidden_dims": list(SMALL_RUN["hidden_dims"])}


@pytest.fixture
def test_output_dir(tmp_path) -> Path:
    output_dir = tmp_path / "results"
    output_dir.mkdir()
    return output_dir


def pytest_configure(config):
    """Configure pytest"""
    config.addinivalue_line("markers", "slow: slow running tests")
    config.addinivalue_line("markers", "acceptance: scaled-down directional experiments")


def pytest_collection_modifyitems(config, items):
    """Add markers based on test file names"""
    for item in items:
        if "test_acceptance" in item.nodeid:
            item.add_marker(pytest.mark.acceptance)
            item.add_marker(pytest.mark.slow)
        elif "test_orchestrator" in item.nodeid or "test_cli" in item.nodeid:
            item.add_marker(pytest.mark.integration)
        else:
            item.add_marker(pytest.mark.unit)


def pytest_runtest_setup(item):
    """Skip slow tests unless explicitly requested"""
    if "slow" in [mark.name for mark in item.iter_markers()]:
        if not item.config.getoption("--runslow", default=False):
            pytest.skip("need --runslow option to run")


def pytest_addoption(parser):
    """Add custom command line options"""
    parser.addoption(
        "--runslow", action="store_true", default=False,
        help="run slow tests (directional experiments)"
    )


# Utility functions for tests
def random_tensor(shape, seed: int = 0, scale: float = 1.0) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=generator, dtype=DTYPE) * scale


def make_task(dataset: Dataset, indices, template: SplitModel, client_id: int = 0,
              round_index: int = 0, run_seed: int = 0) -> LocalTask:
    """LocalTask over an explicit index list"""
    client = ClientData(client_id, dataset, np.asarray(indices, dtype=np.int64))
    return LocalTask(client=client, round_index=round_index, run_seed=run_seed, template=template)


def make_run_config(overrides: Optional[Dict[str, Any]] = None, **kwargs) -> RunConfig:
    data = {**SMALL_RUN, "dataset": dict(SMALL_RUN["dataset"])}
    data.update(overrides or {})
    data.update(kwargs)
    if isinstance(data.get("strategy"), Strategy):
        data["strategy"] = data["strategy"].value
    return RunConfig.model_validate(data)
