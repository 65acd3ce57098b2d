"""
Exchange barrier: the rendezvous where matched clients swap model parts

Every matched client parks its phase-1 model here. When the last one
arrives, the barrier action performs all exchanges serially in plan order,
then releases everybody into phase 2.
"""

import logging
import threading
from typing import Dict, Optional

from app.core.errors import ExchangeProtocolError
from app.core.matching import MatchPlan
from app.core.split_model import ExchangeUnit, SplitModel, adopt, exchange

logger = logging.getLogger(__name__)


class ExchangeBarrier:
    """
    Lock-step rendezvous for one round.

    ``slots`` is the worker-slot semaphore of the round; a waiting client gives
    its slot back so the remaining clients can reach the barrier even when
    there are fewer slots than participants.
    """

    def __init__(self, plan: MatchPlan, unit: ExchangeUnit = ExchangeUnit.CLASSIFIER,
                 slots: Optional[threading.Semaphore] = None, timeout: Optional[float] = None):
        self.plan = plan
        self.unit = unit
        self._slots = slots
        self._participants = set(plan.participants())
        self._models: Dict[int, SplitModel] = {}
        self._lock = threading.Lock()
        self._barrier = threading.Barrier(len(self._participants), action=self._perform_exchange,
                                          timeout=timeout) if self._participants else None
        self.exchanges_done = 0

    def participates(self, client_id: int) -> bool:
        return client_id in self._participants

    def rendezvous(self, client_id: int, model: SplitModel):
        """Block until every participant has arrived and the exchange is done"""
        if not self.participates(client_id):
            return
        with self._lock:
            self._models[client_id] = model
        if self._slots is not None:
            self._slots.release()
        try:
            self._barrier.wait()
        except threading.BrokenBarrierError as e:
            raise ExchangeProtocolError(
                f"Exchange barrier broken while client {client_id} was waiting "
                f"({len(self._models)}/{len(self._participants)} arrived)"
            ) from e
        finally:
            if self._slots is not None:
                self._slots.acquire()

    def abort(self):
        """Release every waiter with an error"""
        if self._barrier is not None:
            self._barrier.abort()

    def _perform_exchange(self):
        if self.plan.many_to_one:
            snapshot = {k: model.clone() for k, model in self._models.items()}
            for receiver, donor in self.plan.pairs:
                adopt(self._models[receiver], snapshot[donor], self.unit)
            donors = {donor for _, donor in self.plan.pairs}
            unused = sorted(set(self._models) - donors)
            logger.info(f"Many-to-one exchange: {len(unused)} of {len(self._models)} "
                        f"{self.unit.value}s used by nobody {unused}")
        else:
            for a, b in self.plan.pairs:
                exchange(self._models[a], self._models[b], self.unit)
        self.exchanges_done = len(self.plan.pairs)
        logger.debug(f"Exchange barrier released after {self.exchanges_done} {self.unit.value} exchanges")
