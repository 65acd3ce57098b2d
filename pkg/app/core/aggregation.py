"""
Server-side aggregation: weighted model averaging, global features with
the memory mechanism, and the evaluation-vector table

All reductions run in ascending client-id order so results do not depend
on which worker finished first.
"""

import logging
from typing import List, Optional, Sequence, Tuple

import torch

from app.config import Config
from app.core.errors import DimensionError, ValidationError
from app.core.nn import DTYPE, ClassFeatures, check_finite
from app.core.split_model import ParamVector
from app.core.strategies import LocalResult

logger = logging.getLogger(__name__)


def aggregation_weights(sample_counts: Sequence[int], total: Optional[int] = None) -> List[float]:
    """D_k / total, where total defaults to the selected clients' sum"""
    denominator = sum(sample_counts) if total is None else total
    if denominator <= 0:
        raise ValidationError("Cannot weight clients holding no samples")
    return [count / denominator for count in sample_counts]


def aggregate_models(results: Sequence[LocalResult], literal_total: Optional[int] = None) -> ParamVector:
    """
    Weighted average of the uploaded parameter vectors.

    With ``literal_total`` the weights use that global sample count and need
    not sum to 1.
    """
    if not results:
        raise ValidationError("Cannot aggregate an empty result set")
    ordered = sorted(results, key=lambda r: r.client_id)
    layout = ordered[0].params.layout
    for result in ordered[1:]:
        if result.params.layout != layout:
            raise ValidationError(f"Client {result.client_id} uploaded a model with a different layout")

    if Config.CHECKED_MODE:
        for result in ordered:
            check_finite(result.params.data, f"model uploaded by client {result.client_id}")
    weights = aggregation_weights([r.sample_count for r in ordered], literal_total)
    total = torch.zeros(layout.size, dtype=DTYPE)
    for weight, result in zip(weights, ordered):
        total = total + weight * result.params.data
    return ParamVector(total, layout)


def aggregate_features(local_features: Sequence[Tuple[int, ClassFeatures]],
                       global_features: ClassFeatures) -> ClassFeatures:
    """
    Average reported per-class features, substituting the current global
    entry for classes a client did not see.

    A class nobody reported keeps its global entry verbatim, so once set it
    never becomes unset. When the global entry is unset, only reporting
    clients enter the average.
    """
    ordered = sorted(local_features, key=lambda item: item[0])
    for client_id, features in ordered:
        if features.values.shape != global_features.values.shape:
            raise ValidationError(
                f"Client {client_id} reported features {list(features.values.shape)}, "
                f"global table is {list(global_features.values.shape)}"
            )

    values = global_features.values.clone()
    present = global_features.present.clone()
    for c in range(global_features.num_classes):
        if not any(features.is_set(c) for _, features in ordered):
            continue
        contributions = []
        for _, features in ordered:
            if features.is_set(c):
                contributions.append(features.values[c])
            elif global_features.is_set(c):
                contributions.append(global_features.values[c])
        total = torch.zeros(global_features.feature_dim, dtype=DTYPE)
        for vector in contributions:
            total = total + vector
        values[c] = total / len(contributions)
        present[c] = True
    return ClassFeatures(values, present)


def update_eval_table(table: torch.Tensor, reported: torch.Tensor,
                      results: Sequence[LocalResult]) -> Tuple[torch.Tensor, torch.Tensor]:
    """New (table, reported) with each uploading client's row replaced by its latest vector"""
    table = table.clone()
    reported = reported.clone()
    for result in sorted(results, key=lambda r: r.client_id):
        if result.eval_vector is None:
            continue
        if result.eval_vector.shape != (table.shape[1],):
            raise DimensionError(f"Client {result.client_id} eval vector has shape "
                                 f"{list(result.eval_vector.shape)}, expected [{table.shape[1]}]")
        table[result.client_id] = result.eval_vector
        reported[result.client_id] = True
    return table, reported
