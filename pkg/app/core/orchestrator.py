"""
The server: client selection, matching, exchange barrier, aggregation

One call to ``Simulator.run_round`` is one global round. Client updates run
on a thread pool; the number of clients training at the same time is capped
by a semaphore so ``workers`` never changes what is computed, only when.
"""

import logging
import threading
from concurrent.futures import FIRST_EXCEPTION, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
import torch

from app.config import Config
from app.core.aggregation import aggregate_features, aggregate_models, update_eval_table
from app.core.barrier import ExchangeBarrier
from app.core.data import Dataset, Partition
from app.core.errors import ExchangeProtocolError, RoundAbortedError, ValidationError
from app.core.matching import MatchPlan, make_matching, make_matching_many_to_one, select_clients
from app.core.memory import log_memory
from app.core.nn import DTYPE, ClassFeatures
from app.core.seeding import SeedStream, derive_seed
from app.core.split_model import ParamVector, SplitModel, predict, unflatten
from app.core.strategies import ClientData, LocalResult, LocalTask, run_local_update
from app.models.config import ClientConfig, RunConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GlobalState:
    """Server state between rounds; never mutated, each round yields a new one"""
    round_index: int
    model: ParamVector
    global_features: ClassFeatures
    eval_table: torch.Tensor
    reported: torch.Tensor

    @classmethod
    def initial(cls, model: ParamVector, num_clients: int, num_classes: int, feature_dim: int) -> "GlobalState":
        return cls(
            round_index=0,
            model=model,
            global_features=ClassFeatures.empty(num_classes, feature_dim),
            eval_table=torch.zeros((num_clients, num_classes), dtype=DTYPE),
            reported=torch.zeros(num_clients, dtype=torch.bool),
        )


@dataclass
class RoundOutcome:
    state: GlobalState
    selected: List[int]
    results: List[LocalResult]
    plan: Optional[MatchPlan] = None

    @property
    def mean_train_loss(self) -> float:
        return float(np.mean([r.train_loss for r in self.results])) if self.results else 0.0


class Simulator:
    """Runs rounds of one configured federation"""

    def __init__(self, cfg: RunConfig, train: Dataset, partition: Partition, template: SplitModel,
                 workers: int = 1, barrier_timeout: Optional[float] = None):
        if workers < 1:
            raise ValidationError(f"workers must be at least 1, got {workers}")
        if partition.num_clients != cfg.k:
            raise ValidationError(f"Partition has {partition.num_clients} clients, config says k={cfg.k}")
        self.cfg = cfg
        self.client_cfg: ClientConfig = cfg.client_config()
        self.train = train
        self.partition = partition
        self.template = template
        self.workers = workers
        self.barrier_timeout = barrier_timeout if barrier_timeout is not None else Config.BARRIER_TIMEOUT
        torch.set_num_threads(Config.TORCH_THREADS)

    def plan_round(self, state: GlobalState, selected: List[int]) -> Optional[MatchPlan]:
        """Matching for FedCME strategies that exchange; None otherwise"""
        if not (self.client_cfg.strategy.is_fedcme and self.client_cfg.exchange_enabled):
            return None
        vectors = {k: state.eval_table[k] for k in selected}
        if self.client_cfg.many_to_one:
            return make_matching_many_to_one(selected, vectors)
        plan = make_matching(selected, vectors)
        plan.validate()
        return plan

    def run_round(self, state: GlobalState) -> RoundOutcome:
        t = state.round_index
        selected = select_clients(self.partition.eligible_clients(), self.cfg.m,
                                  derive_seed(self.cfg.seed, SeedStream.SELECT, t))
        plan = self.plan_round(state, selected)
        logger.debug(f"Round {t}: selected {selected}" + (f", pairs {list(plan.pairs)}" if plan else ""))

        results = self._dispatch(state, selected, plan)

        literal_total = self.partition.total() if self.cfg.literal_weighting else None
        model = aggregate_models(results, literal_total)
        global_features, eval_table, reported = state.global_features, state.eval_table, state.reported
        if self.client_cfg.strategy.is_fedcme:
            global_features = aggregate_features([(r.client_id, r.local_features) for r in results],
                                                 state.global_features)
            eval_table, reported = update_eval_table(state.eval_table, state.reported, results)

        new_state = GlobalState(t + 1, model, global_features, eval_table, reported)
        log_memory(f"After round {t}")
        return RoundOutcome(new_state, selected, results, plan)

    def _dispatch(self, state: GlobalState, selected: List[int], plan: Optional[MatchPlan]) -> List[LocalResult]:
        slots = threading.Semaphore(self.workers)
        barrier = ExchangeBarrier(plan, self.client_cfg.exchange_unit, slots, self.barrier_timeout) if plan else None
        global_features = state.global_features if self.client_cfg.strategy.is_fedcme else None

        def work(client_id: int) -> LocalResult:
            with slots:
                task = LocalTask(
                    client=ClientData(client_id, self.train, self.partition.client_indices[client_id]),
                    round_index=state.round_index,
                    run_seed=self.cfg.seed,
                    template=self.template,
                )
                return run_local_update(state.model, task, self.client_cfg, global_features, barrier)

        # one thread per client: parked clients must not starve those still training
        with ThreadPoolExecutor(max_workers=len(selected), thread_name_prefix="client") as pool:
            futures: Dict[Future, int] = {pool.submit(work, k): k for k in selected}
            done, _ = wait(futures, return_when=FIRST_EXCEPTION)
            if any(f.exception() is not None for f in done) and barrier is not None:
                barrier.abort()
            wait(futures)

        failures = sorted(((futures[f], f.exception()) for f in futures if f.exception() is not None),
                          key=lambda item: (isinstance(item[1], ExchangeProtocolError), item[0]))
        if failures:
            client_id, cause = failures[0]
            logger.error(f"Round {state.round_index}: client {client_id} failed: {cause}")
            raise RoundAbortedError(state.round_index, client_id, cause) from cause

        return sorted((f.result() for f in futures), key=lambda r: r.client_id)


def evaluate_global(w: ParamVector, template: SplitModel, test_set: Dataset) -> float:
    """Fraction of argmax-correct predictions"""
    if len(test_set) == 0:
        raise ValidationError("Cannot evaluate on an empty test set")
    model = unflatten(w, template)
    correct = int((predict(model, test_set.x) == test_set.y).sum())
    return correct / len(test_set)
