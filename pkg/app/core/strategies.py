"""
Per-client local training for FedAvg, FedProx, FedRS and FedCME

Every strategy runs through the same per-batch step, so a strategy whose
extra term has a zero factor follows the FedAvg trajectory bit for bit.
"""

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, List, Optional

import numpy as np
import torch

from app.core.data import Dataset, batch_iter, split_eval
from app.core.errors import EmptyClientError
from app.core.nn import (
    DTYPE,
    ClassFeatures,
    GradBundle,
    l2_feature_loss,
    proximal_term,
    restricted_softmax_cross_entropy,
    sgd_step,
    softmax_cross_entropy,
)
from app.core.seeding import SeedStream, derive_seed
from app.core.split_model import (
    ParamVector,
    SplitModel,
    classifier_backward,
    extractor_backward,
    extractor_forward,
    flatten,
    forward_logits,
    predict,
    unflatten,
)
from app.models.config import ClientConfig, Strategy

if TYPE_CHECKING:
    from app.core.barrier import ExchangeBarrier

logger = logging.getLogger(__name__)


@dataclass
class ClientData:
    """One client's view of the shared training set"""
    client_id: int
    dataset: Dataset
    indices: np.ndarray

    @property
    def size(self) -> int:
        return len(self.indices)

    def class_counts(self) -> np.ndarray:
        return self.dataset.label_counts(self.indices)

    def batch(self, indices: np.ndarray):
        index = torch.as_tensor(indices, dtype=torch.long)
        return self.dataset.x[index], self.dataset.y[index]


@dataclass
class LocalTask:
    """Everything a client needs to train in one round"""
    client: ClientData
    round_index: int
    run_seed: int
    template: SplitModel

    @property
    def batch_seed(self) -> int:
        return derive_seed(self.run_seed, SeedStream.BATCH, self.client.client_id, self.round_index)

    @property
    def eval_seed(self) -> int:
        return derive_seed(self.run_seed, SeedStream.EVAL, self.client.client_id, self.round_index)


@dataclass
class FeatureAccumulator:
    """Running per-class sums of extracted features"""
    sums: torch.Tensor
    present: torch.Tensor

    @classmethod
    def empty(cls, num_classes: int, feature_dim: int) -> "FeatureAccumulator":
        return cls(torch.zeros((num_classes, feature_dim), dtype=DTYPE),
                   torch.zeros(num_classes, dtype=torch.bool))

    def add(self, features: torch.Tensor, labels: torch.Tensor):
        self.sums.index_add_(0, labels, features)
        self.present[labels] = True


@dataclass
class LocalResult:
    client_id: int
    params: ParamVector
    sample_count: int
    train_loss: float
    local_features: Optional[ClassFeatures] = None
    eval_vector: Optional[torch.Tensor] = None


@dataclass
class PhaseState:
    """A FedCME model between phases"""
    model: SplitModel
    accumulator: FeatureAccumulator
    epochs_completed: int = 0
    losses: List[float] = field(default_factory=list)

    @classmethod
    def start(cls, model: SplitModel) -> "PhaseState":
        return cls(model, FeatureAccumulator.empty(model.num_classes, model.feature_dim))


@dataclass
class StepTerms:
    """Optional loss terms added to cross-entropy for one batch step"""
    class_scale: Optional[torch.Tensor] = None
    anchor: Optional[List[torch.Tensor]] = None
    mu_prox: float = 0.0
    global_features: Optional[ClassFeatures] = None
    mu: float = 0.0
    accumulator: Optional[FeatureAccumulator] = None


def sgd_batch(model: SplitModel, x: torch.Tensor, y: torch.Tensor, lr: float, terms: StepTerms) -> float:
    """
    One SGD step on cross-entropy plus whichever terms are active.

    Alignment gradients enter at the feature layer, so they reach theta only.
    """
    features, cache = extractor_forward(model, x)
    if terms.accumulator is not None:
        terms.accumulator.add(features, y)

    logits = forward_logits(model, features)
    if terms.class_scale is not None:
        loss, dlogits = restricted_softmax_cross_entropy(logits, y, terms.class_scale)
    else:
        loss, dlogits = softmax_cross_entropy(logits, y)
    dfeatures, classifier_grads = classifier_backward(model, features, dlogits)

    if terms.global_features is not None and terms.mu > 0:
        align_loss, dalign = l2_feature_loss(features, y, terms.global_features)
        loss += terms.mu * align_loss
        dfeatures = dfeatures + terms.mu * dalign

    grads = GradBundle(extractor_backward(model, cache, dfeatures) + classifier_grads)
    params = model.parameters()
    if terms.anchor is not None and terms.mu_prox > 0:
        prox_loss, prox_grads = proximal_term(params, terms.anchor, terms.mu_prox)
        loss += prox_loss
        grads = grads.add(prox_grads)

    sgd_step(params, grads, lr)
    return loss


def train_epochs(model: SplitModel, task: LocalTask, cfg: ClientConfig, epochs: range,
                 terms: StepTerms) -> List[float]:
    """Batch losses for the given epochs, in order"""
    losses = []
    client = task.client
    for epoch in epochs:
        for batch in batch_iter(client.indices, cfg.batch_size, task.batch_seed, epoch):
            x, y = client.batch(batch)
            losses.append(sgd_batch(model, x, y, cfg.lr, terms))
    return losses


def _require_data(task: LocalTask):
    if task.client.size == 0:
        raise EmptyClientError(f"Client {task.client.client_id} holds no samples")


def _mean(losses: List[float]) -> float:
    return float(np.mean(losses)) if losses else 0.0


def _run_plain(w_global: ParamVector, task: LocalTask, cfg: ClientConfig, terms: StepTerms) -> LocalResult:
    _require_data(task)
    model = unflatten(w_global, task.template)
    losses = train_epochs(model, task, cfg, range(cfg.local_epochs), terms)
    return LocalResult(task.client.client_id, flatten(model), task.client.size, _mean(losses))


def local_update_fedavg(w_global: ParamVector, task: LocalTask, cfg: ClientConfig) -> LocalResult:
    """E epochs of mini-batch SGD on cross-entropy"""
    return _run_plain(w_global, task, cfg, StepTerms())


def local_update_fedprox(w_global: ParamVector, task: LocalTask, cfg: ClientConfig) -> LocalResult:
    """SGD on cross-entropy + (mu_prox / 2) ||w - w_global||^2"""
    anchor = unflatten(w_global, task.template).parameters()
    return _run_plain(w_global, task, cfg, StepTerms(anchor=anchor, mu_prox=cfg.mu_prox))


def restricted_class_scale(client: ClientData, alpha_rs: float) -> torch.Tensor:
    """alpha_rs for classes the client never sees, 1 for the rest"""
    present = torch.as_tensor(client.class_counts() > 0)
    return torch.where(present, torch.ones(len(present), dtype=DTYPE),
                       torch.full((len(present),), alpha_rs, dtype=DTYPE))


def local_update_fedrs(w_global: ParamVector, task: LocalTask, cfg: ClientConfig) -> LocalResult:
    """Restricted softmax: logits of locally missing classes scaled by alpha_rs"""
    scale = restricted_class_scale(task.client, cfg.alpha_rs)
    return _run_plain(w_global, task, cfg, StepTerms(class_scale=scale))


def fedcme_phase(start, task: LocalTask, cfg: ClientConfig, global_features: Optional[ClassFeatures],
                 epoch_range: range) -> PhaseState:
    """
    Train over epoch_range, recording per-class features from every batch.

    ``start`` is either a fresh SplitModel or the PhaseState of the previous phase.
    """
    state = start if isinstance(start, PhaseState) else PhaseState.start(start)
    if len(epoch_range) == 0:
        logger.warning(f"Client {task.client.client_id}: empty epoch range {epoch_range}, phase skipped")
        return state

    align_to = global_features if cfg.alignment_enabled else None
    terms = StepTerms(global_features=align_to, mu=cfg.mu, accumulator=state.accumulator)
    state.losses.extend(train_epochs(state.model, task, cfg, epoch_range, terms))
    state.epochs_completed = epoch_range.stop
    return state


def finalize_features(accumulator: FeatureAccumulator, local_epochs: int,
                      per_class_counts: np.ndarray) -> ClassFeatures:
    """Per-class sums divided by E * |D_k,c|; classes never seen stay unset"""
    counts = torch.as_tensor(np.asarray(per_class_counts), dtype=DTYPE)
    present = accumulator.present & (counts > 0)
    denominators = (local_epochs * counts).clamp_min(1.0).unsqueeze(1)
    values = torch.where(present.unsqueeze(1), accumulator.sums / denominators,
                         torch.zeros_like(accumulator.sums))
    return ClassFeatures(values, present.clone())


def evaluate_vector(model: SplitModel, x: torch.Tensor, y: torch.Tensor, num_classes: int) -> torch.Tensor:
    """Per-class accuracy; classes absent from the evaluation data score 0"""
    if len(y) == 0:
        return torch.zeros(num_classes, dtype=DTYPE)
    correct = (predict(model, x) == y)
    totals = torch.bincount(y, minlength=num_classes).to(DTYPE)
    hits = torch.bincount(y[correct], minlength=num_classes).to(DTYPE)
    return torch.where(totals > 0, hits / totals.clamp_min(1.0), torch.zeros_like(totals))


def local_update_fedcme(w_global: ParamVector, task: LocalTask, cfg: ClientConfig,
                        global_features: Optional[ClassFeatures],
                        barrier: Optional["ExchangeBarrier"] = None) -> LocalResult:
    """Two phases around a mid-training exchange, then feature finalisation and self-evaluation"""
    _require_data(task)
    client = task.client
    midpoint = cfg.local_epochs // 2

    state = fedcme_phase(unflatten(w_global, task.template), task, cfg, global_features, range(0, midpoint))
    if cfg.exchange_enabled and barrier is not None and barrier.participates(client.client_id):
        barrier.rendezvous(client.client_id, state.model)
    state = fedcme_phase(state, task, cfg, global_features, range(midpoint, cfg.local_epochs))

    features = finalize_features(state.accumulator, cfg.local_epochs, client.class_counts())
    split = split_eval(client.indices, cfg.eval_fraction, task.eval_seed)
    eval_x, eval_y = client.batch(split.indices)
    eval_vector = evaluate_vector(state.model, eval_x, eval_y, state.model.num_classes)

    logger.debug(f"Client {client.client_id} round {task.round_index}: "
                 f"{len(state.losses)} steps, eval vector {eval_vector.tolist()}")
    return LocalResult(client.client_id, flatten(state.model), client.size, _mean(state.losses),
                       local_features=features, eval_vector=eval_vector)


def run_local_update(w_global: ParamVector, task: LocalTask, cfg: ClientConfig,
                     global_features: Optional[ClassFeatures] = None,
                     barrier: Optional["ExchangeBarrier"] = None) -> LocalResult:
    """Dispatch on cfg.strategy"""
    if cfg.strategy.is_fedcme:
        return local_update_fedcme(w_global, task, cfg, global_features, barrier)
    if cfg.strategy == Strategy.FEDPROX:
        return local_update_fedprox(w_global, task, cfg)
    if cfg.strategy == Strategy.FEDRS:
        return local_update_fedrs(w_global, task, cfg)
    return local_update_fedavg(w_global, task, cfg)
