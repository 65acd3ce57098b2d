"""
Client selection and counterpart matching from evaluation vectors
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from app.core.errors import ConfigurationError, DimensionError, ValidationError
from app.core.nn import DTYPE

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MatchPlan:
    """
    Pairing for one round.

    Pairwise plans hold (a, b) pairs in the order they were formed and are
    symmetric. Many-to-one plans hold (receiver, donor) pairs, one per receiver.
    """
    pairs: Tuple[Tuple[int, int], ...]
    unmatched: Tuple[int, ...] = ()
    many_to_one: bool = False

    @property
    def counterpart(self) -> Dict[int, int]:
        mapping = {a: b for a, b in self.pairs}
        if not self.many_to_one:
            mapping.update({b: a for a, b in self.pairs})
        return mapping

    def partner(self, client_id: int) -> Optional[int]:
        return self.counterpart.get(client_id)

    def participants(self) -> List[int]:
        """Clients that must attend the exchange"""
        return sorted({k for pair in self.pairs for k in pair})

    def validate(self):
        if self.many_to_one:
            return
        mapping = self.counterpart
        for k, partner in mapping.items():
            if partner == k or mapping.get(partner) != k:
                raise ValidationError(f"Match plan is not a symmetric pairing at client {k}")


def cosine_similarity(u: torch.Tensor, v: torch.Tensor) -> float:
    """u.v / (|u| |v|), 0 when either vector is zero"""
    if u.shape != v.shape:
        raise DimensionError(f"Cannot compare vectors of shape {list(u.shape)} and {list(v.shape)}")
    norm_u = float(torch.linalg.vector_norm(u))
    norm_v = float(torch.linalg.vector_norm(v))
    if norm_u == 0.0 or norm_v == 0.0:
        return 0.0
    return max(-1.0, min(1.0, float(torch.dot(u, v)) / (norm_u * norm_v)))


def mean_vector(selected: Sequence[int], eval_vectors: Mapping[int, torch.Tensor]) -> torch.Tensor:
    """Centroid of the selected clients' vectors, accumulated in client order"""
    first = eval_vectors[selected[0]]
    centroid = torch.zeros_like(first, dtype=DTYPE)
    for k in selected:
        centroid = centroid + eval_vectors[k] / len(selected)
    return centroid


def make_matching(selected: Sequence[int], eval_vectors: Mapping[int, torch.Tensor]) -> MatchPlan:
    """
    Greedy complementary pairing.

    Clients are sorted by similarity to the centroid (ascending, ties by id);
    the head of the list is paired with the remaining client least similar to
    it, both are removed, and so on. With an odd count the last client is
    left unmatched.
    """
    ids = sorted(selected)
    if not ids:
        raise ValidationError("Cannot match an empty selection")
    centroid = mean_vector(ids, eval_vectors)
    remaining = sorted(ids, key=lambda k: (cosine_similarity(eval_vectors[k], centroid), k))

    pairs = []
    while len(remaining) >= 2:
        head = remaining.pop(0)
        partner = min(remaining, key=lambda j: (cosine_similarity(eval_vectors[head], eval_vectors[j]), j))
        remaining.remove(partner)
        pairs.append((head, partner))

    if remaining:
        logger.info(f"Client {remaining[0]} left unmatched this round")
    return MatchPlan(tuple(pairs), tuple(remaining))


def make_matching_many_to_one(selected: Sequence[int], eval_vectors: Mapping[int, torch.Tensor]) -> MatchPlan:
    """Each client independently takes its least similar peer as donor; donors may repeat"""
    ids = sorted(selected)
    if not ids:
        raise ValidationError("Cannot match an empty selection")
    if len(ids) == 1:
        return MatchPlan((), (ids[0],), many_to_one=True)

    pairs = []
    for k in ids:
        donor = min((j for j in ids if j != k),
                    key=lambda j: (cosine_similarity(eval_vectors[k], eval_vectors[j]), j))
        pairs.append((k, donor))
    return MatchPlan(tuple(pairs), (), many_to_one=True)


def select_clients(eligible: Sequence[int], m: int, seed: int) -> List[int]:
    """Uniform sample of m eligible clients without replacement, sorted by id"""
    if m > len(eligible):
        raise ConfigurationError(f"Cannot select {m} clients from {len(eligible)} eligible (nonempty) clients",
                                 key_path="m")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(np.asarray(eligible, dtype=np.int64), size=m, replace=False)
    return sorted(int(k) for k in chosen)
