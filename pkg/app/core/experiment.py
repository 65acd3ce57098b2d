"""
Experiment driver: config parsing, data preparation, the round loop and seed sweeps
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Tuple, Union

import pydantic

from app.config import Config
from app.core.data import Dataset, dirichlet_partition, generate_blobs, load_idx, mean_total_variation, train_test_split
from app.core.errors import ConfigurationError
from app.core.memory import cleanup_memory, log_memory
from app.core.metrics import MetricsRecord, write_metrics
from app.core.orchestrator import GlobalState, Simulator, evaluate_global
from app.core.seeding import SeedStream, derive_seed, torch_generator
from app.core.split_model import build_split_model, flatten
from app.models.config import BlobsSpec, RunConfig

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _key_path(loc: Tuple) -> str:
    # discriminated unions add the tag to the location, e.g. ('dataset', 'blobs', 'dim')
    parts = [str(part) for part in loc if part not in ("blobs", "idx")]
    return ".".join(parts) or "<root>"


def parse_config(path: PathLike) -> RunConfig:
    """Read and validate a JSON run configuration; unknown keys are rejected"""
    text = Path(path).read_text(encoding="utf-8")
    try:
        return RunConfig.model_validate_json(text)
    except pydantic.ValidationError as e:
        first = e.errors()[0]
        raise ConfigurationError(first["msg"], key_path=_key_path(first["loc"])) from e


def prepare_data(cfg: RunConfig) -> Tuple[Dataset, Dataset]:
    """Training and test sets for the configured dataset"""
    spec = cfg.dataset
    if isinstance(spec, BlobsSpec):
        full = generate_blobs(spec.num_classes, spec.dim, spec.n_per_class, spec.spread,
                              derive_seed(cfg.seed, SeedStream.DATA), center_scale=spec.center_scale)
        return train_test_split(full, cfg.test_fraction, derive_seed(cfg.seed, SeedStream.SPLIT))

    train = load_idx(spec.images, spec.labels, spec.num_classes)
    if spec.test_images is not None:
        return train, load_idx(spec.test_images, spec.test_labels, spec.num_classes)
    return train_test_split(train, cfg.test_fraction, derive_seed(cfg.seed, SeedStream.SPLIT))


@dataclass
class ExperimentResult:
    config: RunConfig
    records: List[MetricsRecord] = field(default_factory=list)
    final_state: Optional[GlobalState] = None
    metrics_path: Optional[Path] = None

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].test_acc if self.records else 0.0


def run_experiment(cfg: RunConfig, workers: int = 1, write: bool = True,
                   output_path: Optional[PathLike] = None) -> ExperimentResult:
    """Build data and model from the config, run T rounds, evaluate after each"""
    train, test = prepare_data(cfg)
    partition = dirichlet_partition(train, cfg.k, cfg.dirichlet_alpha, derive_seed(cfg.seed, SeedStream.PARTITION))
    logger.info(f"Partitioned {partition.total()} samples over {cfg.k} clients "
                f"(alpha={cfg.dirichlet_alpha}, mean TV distance {mean_total_variation(partition, train):.3f}, "
                f"{cfg.k - len(partition.eligible_clients())} empty)")

    template = build_split_model(train.dim, cfg.hidden_dims, train.num_classes,
                                 torch_generator(derive_seed(cfg.seed, SeedStream.INIT)))
    state = GlobalState.initial(flatten(template), cfg.k, train.num_classes, template.feature_dim)
    simulator = Simulator(cfg, train, partition, template, workers=workers)

    result = ExperimentResult(cfg)
    for _ in range(cfg.t):
        started = time.perf_counter()
        outcome = simulator.run_round(state)
        state = outcome.state
        accuracy = evaluate_global(state.model, template, test)
        wall_ms = (time.perf_counter() - started) * 1000.0
        result.records.append(MetricsRecord(state.round_index, accuracy, outcome.mean_train_loss,
                                            wall_ms, cfg.strategy.value, cfg.seed))
        logger.info(f"[{cfg.strategy.value} seed={cfg.seed}] round {state.round_index}/{cfg.t}: "
                    f"test_acc={accuracy:.4f} loss={outcome.mean_train_loss:.4f} ({wall_ms:.0f} ms)")
    result.final_state = state

    if write:
        path = Path(output_path) if output_path is not None else cfg.resolved_output_path()
        result.metrics_path = write_metrics(path, result.records)
    return result


def sweep_path(base: Path, seed: int) -> Path:
    """results/run.csv -> results/run_seed3.csv"""
    return base.with_name(f"{base.stem}_seed{seed}{base.suffix}")


def run_sweep(cfg: RunConfig, seeds: Iterable[int], workers: int = 1, write: bool = True) -> List[ExperimentResult]:
    """One run per seed; metrics files are suffixed with the seed"""
    base = cfg.resolved_output_path() if cfg.output_path else Path(Config.OUTPUT_DIR) / f"{cfg.strategy.value}.csv"
    results = []
    for seed in seeds:
        seeded = cfg.model_copy(update={"seed": seed})
        results.append(run_experiment(seeded, workers=workers, write=write, output_path=sweep_path(base, seed)))
        cleanup_memory()
        log_memory(f"After sweep seed {seed}")
    return results
