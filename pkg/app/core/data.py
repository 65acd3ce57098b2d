"""
Datasets, heterogeneous partitioning and seeded batching

Datasets are immutable once built and shared read-only by every client
worker. All randomness comes from numpy generators seeded by the caller.
"""

import gzip
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np
import torch

from app.config import Config
from app.core.errors import DimensionError, FormatError, LengthError, ValidationError
from app.core.nn import DTYPE, check_finite

logger = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803  # 2051
IDX_LABEL_MAGIC = 0x00000801  # 2049
PIXEL_SCALE = 255.0

PathLike = Union[str, Path]


@dataclass(frozen=True)
class Dataset:
    """Samples x [N x d] (float64) with class ids y [N]"""
    x: torch.Tensor
    y: torch.Tensor
    num_classes: int
    image_shape: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if self.x.dim() != 2 or self.y.dim() != 1:
            raise DimensionError(f"Dataset needs x [N x d] and y [N], got {list(self.x.shape)} "
                                 f"and {list(self.y.shape)}")
        if self.x.shape[0] != self.y.shape[0]:
            raise DimensionError(f"{self.x.shape[0]} samples but {self.y.shape[0]} labels")
        if self.num_classes < 1:
            raise ValidationError(f"num_classes must be positive, got {self.num_classes}")
        if self.y.numel() and (int(self.y.min()) < 0 or int(self.y.max()) >= self.num_classes):
            raise ValidationError(f"Labels must lie in [0, {self.num_classes})")
        if Config.CHECKED_MODE:
            check_finite(self.x, "dataset samples")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def labels(self) -> np.ndarray:
        return self.y.numpy()

    def subset(self, indices: np.ndarray) -> "Dataset":
        index = torch.as_tensor(np.asarray(indices, dtype=np.int64))
        return Dataset(self.x[index], self.y[index], self.num_classes, self.image_shape)

    def label_counts(self, indices: Optional[np.ndarray] = None) -> np.ndarray:
        labels = self.labels() if indices is None else self.labels()[np.asarray(indices, dtype=np.int64)]
        return np.bincount(labels, minlength=self.num_classes)


@dataclass
class Partition:
    """Per-client index lists into one parent dataset"""
    client_indices: List[np.ndarray]

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)

    def sizes(self) -> List[int]:
        return [len(indices) for indices in self.client_indices]

    def total(self) -> int:
        return sum(self.sizes())

    def eligible_clients(self) -> List[int]:
        """Clients holding at least one sample"""
        return [k for k, indices in enumerate(self.client_indices) if len(indices) > 0]

    def validate(self, num_samples: int):
        """Disjoint, in-range index lists"""
        seen = np.concatenate(self.client_indices) if self.client_indices else np.empty(0, dtype=np.int64)
        if seen.size and (seen.min() < 0 or seen.max() >= num_samples):
            raise ValidationError("Partition holds an index outside the dataset")
        if np.unique(seen).size != seen.size:
            raise ValidationError("Partition index lists overlap")


@dataclass
class EvalSplit:
    """Self-evaluation subset of one client's indices"""
    indices: np.ndarray
    fraction: float
    empty: bool = False


def default_center_scale(num_classes: int, dim: int, spread: float) -> float:
    """
    Centre standard deviation 2 * spread * C^(2/d).

    At this scale the expected number of centre pairs closer than 4 * spread
    stays below 1/2 for any C and d, so a draw succeeds at least half the time.
    """
    unit = spread if spread > 0 else 1.0
    return 2.0 * unit * num_classes ** (2.0 / dim)


def _min_pairwise_distance(centers: np.ndarray) -> float:
    rows, cols = np.triu_indices(len(centers), k=1)
    return float(np.linalg.norm(centers[rows] - centers[cols], axis=1).min())


def generate_blobs(num_classes: int, dim: int, n_per_class: int, spread: float, seed: int,
                   center_scale: Optional[float] = None, max_attempts: int = 1000) -> Dataset:
    """
    Isotropic Gaussian blobs around seeded random centres.

    Centres are drawn together from N(0, center_scale^2 I); the whole set is
    redrawn until every pair is at least 4 * spread apart. ``center_scale``
    defaults to ``default_center_scale``.
    """
    if num_classes < 2 or dim < 2:
        raise ValidationError(f"Blobs need at least 2 classes and 2 dimensions, got {num_classes} and {dim}")
    if spread < 0 or n_per_class < 0:
        raise ValidationError("spread and n_per_class must be non-negative")
    if center_scale is None:
        center_scale = default_center_scale(num_classes, dim, spread)
    elif center_scale <= 0:
        raise ValidationError(f"center_scale must be positive, got {center_scale}")

    rng = np.random.default_rng(seed)
    min_distance = 4.0 * spread
    for attempt in range(max_attempts):
        centers = rng.normal(0.0, center_scale, size=(num_classes, dim))
        if _min_pairwise_distance(centers) >= min_distance:
            break
    else:
        raise ValidationError(
            f"Could not draw {num_classes} centres at pairwise distance >= {min_distance} "
            f"in {max_attempts} attempts; raise center_scale or lower spread"
        )
    if attempt:
        logger.debug(f"Blob centres accepted after {attempt + 1} draws")

    x = np.concatenate([center + rng.normal(0.0, spread, size=(n_per_class, dim)) for center in centers])
    y = np.repeat(np.arange(num_classes, dtype=np.int64), n_per_class)
    logger.debug(f"Generated {len(y)} blob samples: {num_classes} classes, d={dim}, spread={spread}")
    return Dataset(torch.from_numpy(x.astype(np.float64)), torch.from_numpy(y), num_classes)


def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _write_bytes(path: PathLike, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as f:
        f.write(payload)


def _parse_header(raw: bytes, magic: int, dims: int, path: PathLike) -> Tuple[int, ...]:
    header_size = 4 * (1 + dims)
    if len(raw) < 4:
        raise LengthError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: magic number 0x{found:08x}, expected 0x{magic:08x}")
    if len(raw) < header_size:
        raise LengthError(f"{path}: header truncated ({len(raw)} of {header_size} bytes)")
    return struct.unpack(f">{dims}I", raw[4:header_size])


def _frombuffer(raw: bytes, count: int, offset: int) -> np.ndarray:
    if count == 0:
        return np.zeros(0, dtype=np.uint8)
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=offset)


def load_idx(images_path: PathLike, labels_path: PathLike, num_classes: int = 10) -> Dataset:
    """
    Read an IDX image/label pair (big-endian, optionally gzipped).

    Pixels are flattened row-major and scaled to [0, 1].
    """
    image_raw = _read_bytes(images_path)
    count, rows, cols = _parse_header(image_raw, IDX_IMAGE_MAGIC, 3, images_path)
    needed = count * rows * cols
    if len(image_raw) - 16 < needed:
        raise LengthError(f"{images_path}: expected {needed} pixel bytes, found {len(image_raw) - 16}")

    label_raw = _read_bytes(labels_path)
    (label_count,) = _parse_header(label_raw, IDX_LABEL_MAGIC, 1, labels_path)
    if len(label_raw) - 8 < label_count:
        raise LengthError(f"{labels_path}: expected {label_count} labels, found {len(label_raw) - 8}")
    if label_count != count:
        raise ValidationError(f"{count} images but {label_count} labels")

    pixels = _frombuffer(image_raw, needed, 16).reshape(count, rows * cols)
    labels = _frombuffer(label_raw, label_count, 8).astype(np.int64)
    x = torch.from_numpy(pixels.astype(np.float64) / PIXEL_SCALE)
    logger.info(f"Loaded {count} images of {rows}x{cols} from {images_path}")
    return Dataset(x, torch.from_numpy(labels), num_classes, (rows, cols))


def write_idx(dataset: Dataset, images_path: PathLike, labels_path: PathLike,
              rows: Optional[int] = None, cols: Optional[int] = None):
    """Write a dataset back to an IDX pair, re-quantising pixels to bytes"""
    if rows is None or cols is None:
        if dataset.image_shape is None:
            raise ValidationError("rows and cols are required for a dataset without image_shape")
        rows, cols = dataset.image_shape
    if rows * cols != dataset.dim:
        raise DimensionError(f"{rows}x{cols} images do not match feature width {dataset.dim}")
    check_finite(dataset.x, "dataset pixels")

    pixels = torch.round(dataset.x * PIXEL_SCALE).clamp(0, 255).to(torch.uint8).numpy()
    labels = dataset.y.numpy().astype(np.uint8)
    _write_bytes(images_path, struct.pack(">IIII", IDX_IMAGE_MAGIC, len(dataset), rows, cols) + pixels.tobytes())
    _write_bytes(labels_path, struct.pack(">II", IDX_LABEL_MAGIC, len(dataset)) + labels.tobytes())


def train_test_split(dataset: Dataset, test_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Per-class seeded hold-out"""
    if not 0.0 < test_fraction < 1.0:
        raise ValidationError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    labels = dataset.labels()
    train_parts, test_parts = [], []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(labels == c)
        rng.shuffle(members)
        n_test = _round_half_up(test_fraction * members.size)
        test_parts.append(members[:n_test])
        train_parts.append(members[n_test:])
    train = np.sort(np.concatenate(train_parts))
    test = np.sort(np.concatenate(test_parts))
    return dataset.subset(train), dataset.subset(test)


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing exactly to total; leftovers go to the largest fractional parts"""
    raw = proportions / proportions.sum() * total
    counts = np.floor(raw).astype(np.int64)
    leftover = int(total - counts.sum())
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:leftover]] += 1
    return counts


def dirichlet_partition(dataset: Dataset, num_clients: int, alpha: float, seed: int) -> Partition:
    """
    Split each class across clients by p_c ~ Dir(alpha * 1_K).

    Produces the usual mix of label skew and quantity skew; a client may end
    up with no samples at all.
    """
    if num_clients < 1:
        raise ValidationError(f"num_clients must be at least 1, got {num_clients}")
    if alpha <= 0:
        raise ValidationError(f"Dirichlet alpha must be positive, got {alpha}")

    rng = np.random.default_rng(seed)
    labels = dataset.labels()
    buckets: List[List[np.ndarray]] = [[] for _ in range(num_clients)]
    for c in range(dataset.num_classes):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            continue
        rng.shuffle(members)
        proportions = rng.dirichlet(np.full(num_clients, alpha))
        if not np.all(np.isfinite(proportions)) or proportions.sum() <= 0:
            # tiny alpha can underflow every component
            proportions = np.zeros(num_clients)
            proportions[rng.integers(num_clients)] = 1.0
        counts = largest_remainder(proportions, members.size)
        for k, share in enumerate(np.split(members, np.cumsum(counts)[:-1])):
            buckets[k].append(share)

    client_indices = [
        np.sort(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64)
        for parts in buckets
    ]
    return Partition(client_indices)


def label_distribution(partition: Partition, dataset: Dataset) -> np.ndarray:
    """[K x C] label histogram per client"""
    return np.stack([dataset.label_counts(indices) for indices in partition.client_indices])


def mean_total_variation(partition: Partition, dataset: Dataset) -> float:
    """Mean TV distance between each nonempty client's label distribution and the global one"""
    counts = label_distribution(partition, dataset).astype(np.float64)
    global_dist = counts.sum(axis=0) / counts.sum()
    distances = [
        0.5 * np.abs(row / row.sum() - global_dist).sum()
        for row in counts if row.sum() > 0
    ]
    return float(np.mean(distances)) if distances else 0.0


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def split_eval(client_indices: np.ndarray, fraction: float, seed: int) -> EvalSplit:
    """Seeded uniform sample of round(fraction * D_k) indices without replacement"""
    if not 0.0 < fraction < 1.0:
        raise ValidationError(f"eval fraction must be in (0, 1), got {fraction}")
    client_indices = np.asarray(client_indices, dtype=np.int64)
    size = _round_half_up(fraction * client_indices.size)
    if size == 0:
        logger.warning(f"Evaluation split is empty ({client_indices.size} samples, fraction {fraction})")
        return EvalSplit(np.empty(0, dtype=np.int64), fraction, empty=True)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(client_indices, size=size, replace=False)
    return EvalSplit(np.sort(chosen), fraction)


def batch_iter(indices: np.ndarray, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    """Shuffle once per (seed, epoch) and yield consecutive batches, last one partial"""
    if batch_size < 1:
        raise ValidationError(f"batch_size must be at least 1, got {batch_size}")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(np.asarray(indices, dtype=np.int64))
    for start in range(0, order.size, batch_size):
        yield order[start:start + batch_size]
