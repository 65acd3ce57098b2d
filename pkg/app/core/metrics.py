"""
Per-round metrics records, CSV persistence and cross-run summaries
"""

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.errors import FormatError, ValidationError

logger = logging.getLogger(__name__)

CSV_FIELDS = ["round", "test_acc", "mean_train_loss", "wall_ms", "strategy", "seed"]
CHECKPOINTS = 5

PathLike = Union[str, Path]


@dataclass(frozen=True)
class MetricsRecord:
    round: int
    test_acc: float
    mean_train_loss: float
    wall_ms: float
    strategy: str
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.test_acc <= 1.0:
            raise ValidationError(f"test_acc must lie in [0, 1], got {self.test_acc}")

    def to_row(self) -> Dict[str, str]:
        return {
            "round": str(self.round),
            "test_acc": repr(float(self.test_acc)),
            "mean_train_loss": repr(float(self.mean_train_loss)),
            "wall_ms": f"{self.wall_ms:.3f}",
            "strategy": self.strategy,
            "seed": str(self.seed),
        }

    @classmethod
    def from_row(cls, row: Dict[str, str]) -> "MetricsRecord":
        return cls(
            round=int(row["round"]),
            test_acc=float(row["test_acc"]),
            mean_train_loss=float(row["mean_train_loss"]),
            wall_ms=float(row["wall_ms"]),
            strategy=row["strategy"],
            seed=int(row["seed"]),
        )


def _check_rounds(records: Sequence[MetricsRecord], source: str):
    for previous, current in zip(records, records[1:]):
        if current.round <= previous.round:
            raise ValidationError(f"{source}: rounds not strictly increasing at round {current.round}")


def write_metrics(path: PathLike, records: Sequence[MetricsRecord]) -> Path:
    _check_rounds(records, str(path))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for record in records:
            writer.writerow(record.to_row())
    logger.info(f"Wrote {len(records)} metrics rows to {path}")
    return path


def read_metrics(path: PathLike) -> List[MetricsRecord]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_FIELDS:
            raise FormatError(f"{path}: expected header {','.join(CSV_FIELDS)}, got {reader.fieldnames}")
        try:
            records = [MetricsRecord.from_row(row) for row in reader]
        except (TypeError, ValueError) as e:
            raise FormatError(f"{path}: malformed metrics row: {e}") from e
    _check_rounds(records, str(path))
    return records


def checkpoint_rounds(total_rounds: int) -> List[int]:
    """round(T * i / 5) for i = 1..4, never below round 1"""
    return [max(1, int(math.floor(total_rounds * i / CHECKPOINTS + 0.5))) for i in range(1, CHECKPOINTS)]


def rounds_to_target(records: Sequence[MetricsRecord], target: float) -> Optional[int]:
    for record in records:
        if record.test_acc >= target:
            return record.round
    return None


@dataclass
class StrategySummary:
    strategy: str
    runs: int
    final_mean: float
    final_std: float
    checkpoints: List[Tuple[int, float, float]] = field(default_factory=list)
    target_mean: Optional[float] = None
    target_reached: int = 0


def summarize(runs: Dict[str, List[MetricsRecord]], target: Optional[float] = None) -> List[StrategySummary]:
    """Per-strategy mean and population std of final and checkpoint accuracy"""
    if not runs:
        raise ValidationError("compare needs at least one metrics file")
    lengths = {source: len(records) for source, records in runs.items()}
    if any(n == 0 for n in lengths.values()):
        raise ValidationError(f"Empty metrics file among {sorted(lengths)}")
    if len(set(lengths.values())) > 1:
        raise ValidationError(f"Metrics files disagree on T: {lengths}")
    total_rounds = next(iter(lengths.values()))

    grouped: Dict[str, List[List[MetricsRecord]]] = defaultdict(list)
    for source in sorted(runs):
        records = runs[source]
        grouped[records[-1].strategy].append(records)

    summaries = []
    for strategy in sorted(grouped):
        members = grouped[strategy]
        finals = np.array([records[-1].test_acc for records in members])
        checkpoints = []
        for r in checkpoint_rounds(total_rounds):
            values = np.array([records[r - 1].test_acc for records in members])
            checkpoints.append((r, float(values.mean()), float(values.std())))
        summary = StrategySummary(strategy, len(members), float(finals.mean()), float(finals.std()), checkpoints)
        if target is not None:
            hits = [rounds_to_target(records, target) for records in members]
            hits = [h for h in hits if h is not None]
            summary.target_reached = len(hits)
            summary.target_mean = float(np.mean(hits)) if hits else None
        summaries.append(summary)
    return summaries


def format_summary(summaries: Sequence[StrategySummary], target: Optional[float] = None) -> str:
    lines = []
    if summaries:
        header = f"{'strategy':<12} {'runs':>4} {'final acc':>17}"
        for r, _, _ in summaries[0].checkpoints:
            header += f" {'@' + str(r):>17}"
        if target is not None:
            header += f" {'rounds to ' + format(target, '.2f'):>18}"
        lines.append(header)
    for s in summaries:
        line = f"{s.strategy:<12} {s.runs:>4} {s.final_mean * 100:>8.2f} ± {s.final_std * 100:<6.2f}"
        for _, mean, std in s.checkpoints:
            line += f" {mean * 100:>8.2f} ± {std * 100:<6.2f}"
        if target is not None:
            reached = f"{s.target_mean:.1f}" if s.target_mean is not None else "-"
            line += f" {reached:>10} ({s.target_reached}/{s.runs})"
        lines.append(line)
    return "\n".join(lines)
