#!/usr/bin/env python3
"""
Tests for local training: FedAvg, FedProx, FedRS and the two-phase FedCME update
"""

import numpy as np
import pytest
import torch

from app.core.data import batch_iter, generate_blobs
from app.core.errors import EmptyClientError
from app.core.nn import DTYPE, ClassFeatures, LinearLayer, finite_difference_grad, softmax_cross_entropy
from app.core.seeding import torch_generator
from app.core.split_model import (
    SplitModel,
    build_split_model,
    flatten,
    forward_features,
    forward_logits,
    swap_classifiers,
    unflatten,
)
from app.core.strategies import (
    FeatureAccumulator,
    StepTerms,
    evaluate_vector,
    fedcme_phase,
    finalize_features,
    local_update_fedavg,
    local_update_fedcme,
    local_update_fedprox,
    local_update_fedrs,
    restricted_class_scale,
    run_local_update,
    sgd_batch,
    train_epochs,
)
from app.models.config import ClientConfig, Strategy
from tests.conftest import make_task


def params_equal(a, b) -> bool:
    return torch.equal(a.data, b.data)


class MirrorCounterpart:
    """Exchange partner whose classifier equals the caller's at the rendezvous"""

    def __init__(self):
        self.calls = 0

    def participates(self, client_id: int) -> bool:
        return True

    def rendezvous(self, client_id: int, model: SplitModel):
        self.calls += 1
        swap_classifiers(model, model.clone())


@pytest.fixture
def skewed_indices(blobs):
    """Only classes 0 and 1, so classes 2 and 3 are missing locally"""
    labels = blobs.labels()
    return np.flatnonzero(labels < 2)


class TestFedAvg:
    """Plain local SGD"""

    def test_zero_learning_rate_returns_global_model(self, blobs, small_model, client_config):
        task = make_task(blobs, np.arange(40), small_model)
        w = flatten(small_model)
        result = local_update_fedavg(w, task, client_config.model_copy(update={"lr": 0.0}))
        assert params_equal(result.params, w)
        assert result.local_features is None and result.eval_vector is None
        assert result.sample_count == 40

    def test_single_sample_single_step(self, blobs, small_model):
        cfg = ClientConfig(lr=0.1, local_epochs=1, batch_size=1)
        task = make_task(blobs, [5], small_model)
        w = flatten(small_model)
        x, y = blobs.x[5:6], blobs.y[5:6]

        model = unflatten(w, small_model)
        grads = finite_difference_grad(
            lambda _: softmax_cross_entropy(forward_logits(model, forward_features(model, x)), y)[0],
            model.parameters())
        expected = torch.cat([(p - 0.1 * g).reshape(-1) for p, g in zip(model.parameters(), grads)])

        result = local_update_fedavg(w, task, cfg)
        assert torch.allclose(result.params.data, expected, atol=1e-8)

    @pytest.mark.parametrize("seed", range(5))
    def test_full_batch_loss_mostly_non_increasing(self, seed):
        ds = generate_blobs(3, 4, 20, 0.5, seed=seed, center_scale=3.0)
        model = build_split_model(4, [8, 6], 3, torch_generator(seed))
        cfg = ClientConfig(lr=0.05, local_epochs=20, batch_size=len(ds))
        task = make_task(ds, np.arange(len(ds)), model)
        losses = train_epochs(model, task, cfg, range(cfg.local_epochs), StepTerms())
        steps = np.diff(losses)
        assert np.mean(steps <= 1e-12) >= 0.9

    def test_empty_client(self, blobs, small_model, client_config):
        task = make_task(blobs, [], small_model)
        with pytest.raises(EmptyClientError):
            local_update_fedavg(flatten(small_model), task, client_config)


class TestFedProx:
    """Proximal term pulling towards the global model"""

    def test_zero_mu_matches_fedavg(self, blobs, small_model, client_config, skewed_indices):
        task = make_task(blobs, skewed_indices, small_model, client_id=2, round_index=1, run_seed=5)
        w = flatten(small_model)
        avg = local_update_fedavg(w, task, client_config)
        prox = local_update_fedprox(w, task, client_config.model_copy(update={"mu_prox": 0.0}))
        assert params_equal(avg.params, prox.params)

    def test_strong_proximal_term_limits_drift(self, blobs, small_model):
        task = make_task(blobs, np.arange(len(blobs)), small_model)
        w = flatten(small_model)
        cfg = ClientConfig(lr=1e-4, local_epochs=3, batch_size=8, mu_prox=1e4)
        prox = local_update_fedprox(w, task, cfg)
        assert float((prox.params.data - w.data).abs().max()) < 1e-3


class TestFedRS:
    """Restricted softmax for locally missing classes"""

    def test_unit_alpha_matches_fedavg(self, blobs, small_model, client_config, skewed_indices):
        task = make_task(blobs, skewed_indices, small_model)
        w = flatten(small_model)
        avg = local_update_fedavg(w, task, client_config)
        rs = local_update_fedrs(w, task, client_config.model_copy(update={"alpha_rs": 1.0}))
        assert params_equal(avg.params, rs.params)

    @pytest.mark.parametrize("alpha", [0.1, 0.5])
    def test_client_with_every_class_matches_fedavg(self, blobs, small_model, client_config, alpha):
        task = make_task(blobs, np.arange(len(blobs)), small_model)
        w = flatten(small_model)
        avg = local_update_fedavg(w, task, client_config)
        rs = local_update_fedrs(w, task, client_config.model_copy(update={"alpha_rs": alpha}))
        assert params_equal(avg.params, rs.params)

    def test_missing_classes_change_the_update(self, blobs, small_model, client_config, skewed_indices):
        task = make_task(blobs, skewed_indices, small_model)
        w = flatten(small_model)
        avg = local_update_fedavg(w, task, client_config)
        rs = local_update_fedrs(w, task, client_config.model_copy(update={"alpha_rs": 0.1}))
        assert not params_equal(avg.params, rs.params)

    def test_class_scale(self, blobs, small_model, skewed_indices):
        task = make_task(blobs, skewed_indices, small_model)
        assert restricted_class_scale(task.client, 0.5).tolist() == [1.0, 1.0, 0.5, 0.5]


class TestFedCmePhases:
    """Feature recording, alignment and the two-phase update"""

    def test_zero_mu_full_range_matches_fedavg(self, blobs, small_model, client_config, skewed_indices):
        task = make_task(blobs, skewed_indices, small_model, run_seed=8)
        w = flatten(small_model)
        table = ClassFeatures(torch.ones((4, 4), dtype=DTYPE), torch.ones(4, dtype=torch.bool))
        cfg = client_config.model_copy(update={"mu": 0.0, "strategy": Strategy.FEDCME})
        state = fedcme_phase(unflatten(w, small_model), task, cfg, table, range(0, cfg.local_epochs))
        avg = local_update_fedavg(w, task, client_config)
        assert params_equal(flatten(state.model), avg.params)
        assert state.epochs_completed == cfg.local_epochs

    def test_unset_global_features_contribute_nothing(self, blobs, small_model, client_config):
        task = make_task(blobs, np.arange(30), small_model)
        cfg = client_config.model_copy(update={"mu": 5.0})
        aligned = fedcme_phase(small_model.clone(), task, cfg, ClassFeatures.empty(4, 4), range(0, 2))
        plain = fedcme_phase(small_model.clone(), task, cfg.model_copy(update={"mu": 0.0}), None, range(0, 2))
        assert params_equal(flatten(aligned.model), flatten(plain.model))

    def test_global_features_equal_to_batch_means_do_not_change_trajectory(self, blobs, small_model):
        indices = np.arange(0, 120, 3)
        cfg = ClientConfig(lr=0.05, local_epochs=1, batch_size=len(indices), mu=2.0)
        task = make_task(blobs, indices, small_model)
        (batch,) = list(batch_iter(task.client.indices, cfg.batch_size, task.batch_seed, 0))
        x, y = task.client.batch(batch)
        features = forward_features(small_model, x)
        onehot = torch.nn.functional.one_hot(y, 4).to(DTYPE)
        counts = onehot.sum(dim=0)
        means = (onehot.T @ features) / counts.clamp_min(1.0).unsqueeze(1)
        table = ClassFeatures(means, counts > 0)

        aligned = fedcme_phase(small_model.clone(), task, cfg, table, range(0, 1))
        plain = fedcme_phase(small_model.clone(), task, cfg.model_copy(update={"mu": 0.0}), table, range(0, 1))
        assert params_equal(flatten(aligned.model), flatten(plain.model))

    def test_empty_epoch_range_is_a_no_op(self, blobs, small_model, client_config):
        task = make_task(blobs, np.arange(10), small_model)
        before = flatten(small_model)
        state = fedcme_phase(small_model, task, client_config, None, range(0, 0))
        assert params_equal(flatten(state.model), before)
        assert state.epochs_completed == 0

    def test_phase_state_carries_accumulator(self, blobs, small_model, client_config):
        task = make_task(blobs, np.arange(20), small_model)
        first = fedcme_phase(small_model, task, client_config, None, range(0, 1))
        sums_after_first = first.accumulator.sums.clone()
        second = fedcme_phase(first, task, client_config, None, range(1, 2))
        assert second is first
        assert second.epochs_completed == 2
        assert not torch.equal(second.accumulator.sums, sums_after_first)

    def test_exchange_disabled_and_zero_mu_matches_fedavg(self, blobs, small_model, client_config, skewed_indices):
        task = make_task(blobs, skewed_indices, small_model, client_id=1, round_index=3, run_seed=2)
        w = flatten(small_model)
        cfg = client_config.model_copy(update={"strategy": Strategy.FEDCME_OL, "mu": 0.0,
                                               "exchange_enabled": False})
        table = ClassFeatures(torch.randn((4, 4), dtype=DTYPE), torch.ones(4, dtype=torch.bool))
        cme = run_local_update(w, task, cfg, table, None)
        avg = local_update_fedavg(w, task, client_config)
        assert params_equal(cme.params, avg.params)
        assert cme.eval_vector is not None and cme.local_features is not None

    def test_identical_counterpart_classifier_matches_no_exchange(self, blobs, small_model, client_config,
                                                                  skewed_indices):
        task = make_task(blobs, skewed_indices, small_model, client_id=2, round_index=1, run_seed=5)
        w = flatten(small_model)
        values = torch.randn((4, 4), generator=torch.Generator().manual_seed(0), dtype=DTYPE)
        table = ClassFeatures(values, torch.tensor([True, False, True, True]))
        cfg = client_config.model_copy(update={"strategy": Strategy.FEDCME, "local_epochs": 4})
        counterpart = MirrorCounterpart()
        exchanged = local_update_fedcme(w, task, cfg, table, counterpart)
        alone = local_update_fedcme(w, task, cfg.model_copy(update={"exchange_enabled": False}), table, counterpart)
        assert counterpart.calls == 1
        assert params_equal(exchanged.params, alone.params)
        assert torch.equal(exchanged.local_features.values, alone.local_features.values)
        assert torch.equal(exchanged.eval_vector, alone.eval_vector)

    def test_result_fields(self, blobs, small_model, client_config, skewed_indices):
        task = make_task(blobs, skewed_indices, small_model)
        cfg = client_config.model_copy(update={"strategy": Strategy.FEDCME})
        result = local_update_fedcme(flatten(small_model), task, cfg, ClassFeatures.empty(4, 4))
        assert result.local_features.present.tolist() == [True, True, False, False]
        assert float(result.local_features.values[2:].abs().max()) == 0.0
        assert result.eval_vector.shape == (4,)
        assert float(result.eval_vector.min()) >= 0.0 and float(result.eval_vector.max()) <= 1.0
        assert result.eval_vector[2:].tolist() == [0.0, 0.0]


class TestFinalizeFeatures:
    """Normalisation of the accumulated per-class sums"""

    def test_single_sample_single_epoch(self):
        acc = FeatureAccumulator.empty(3, 2)
        acc.add(torch.tensor([[1.5, -2.0]], dtype=DTYPE), torch.tensor([0]))
        features = finalize_features(acc, 1, np.array([1, 0, 0]))
        assert features.values[0].tolist() == [1.5, -2.0]
        assert features.present.tolist() == [True, False, False]

    def test_absent_class_marked_unset(self):
        features = finalize_features(FeatureAccumulator.empty(2, 3), 6, np.array([0, 0]))
        assert not features.is_set(0) and not features.is_set(1)

    def test_two_epochs_average_every_extraction(self, blobs, small_model):
        cfg = ClientConfig(lr=0.05, local_epochs=2, batch_size=4, mu=0.0)
        indices = np.flatnonzero(blobs.labels() == 1)[:6]
        task = make_task(blobs, indices, small_model)

        # brute force: replay the batches, recording features before each step
        replay = small_model.clone()
        recorded = []
        for epoch in range(2):
            for batch in batch_iter(indices, 4, task.batch_seed, epoch):
                x, y = task.client.batch(batch)
                recorded.append(forward_features(replay, x))
                sgd_batch(replay, x, y, cfg.lr, StepTerms())
        expected = torch.cat(recorded).mean(dim=0)

        state = fedcme_phase(small_model.clone(), task, cfg, None, range(0, 2))
        features = finalize_features(state.accumulator, 2, task.client.class_counts())
        assert torch.allclose(features.values[1], expected, atol=1e-12)


class TestEvaluateVector:
    """Per-class self-evaluation accuracy"""

    @staticmethod
    def constant_model(predicted: int, classes: int = 3) -> SplitModel:
        extractor = [LinearLayer(torch.zeros((2, 2), dtype=DTYPE), torch.ones(2, dtype=DTYPE))]
        bias = torch.zeros(classes, dtype=DTYPE)
        bias[predicted] = 1.0
        return SplitModel(extractor, LinearLayer(torch.zeros((classes, 2), dtype=DTYPE), bias))

    def test_constant_prediction(self):
        x = torch.zeros((5, 2), dtype=DTYPE)
        y = torch.tensor([0, 1, 1, 0, 0])
        assert evaluate_vector(self.constant_model(1), x, y, 3).tolist() == [0.0, 1.0, 0.0]

    def test_perfect_classifier(self):
        eye = LinearLayer(torch.eye(2, dtype=DTYPE), torch.zeros(2, dtype=DTYPE))
        model = SplitModel([eye], LinearLayer(torch.eye(2, dtype=DTYPE), torch.zeros(2, dtype=DTYPE)))
        x = torch.tensor([[1.0, 0.0], [0.0, 2.0], [3.0, 0.0]], dtype=DTYPE)
        y = torch.tensor([0, 1, 0])
        assert evaluate_vector(model, x, y, 2).tolist() == [1.0, 1.0]

    def test_weighted_entries_sum_to_correct_count(self, blobs, small_model):
        vector = evaluate_vector(small_model, blobs.x, blobs.y, 4)
        counts = torch.bincount(blobs.y, minlength=4).to(DTYPE)
        correct = int((small_model_predictions(small_model, blobs.x) == blobs.y).sum())
        assert float((vector * counts).sum()) == pytest.approx(correct, abs=1e-9)

    def test_empty_eval_data(self, small_model):
        vector = evaluate_vector(small_model, torch.zeros((0, 6), dtype=DTYPE), torch.zeros(0, dtype=torch.long), 4)
        assert vector.tolist() == [0.0] * 4

    def test_label_blind_model_scores_near_half(self):
        # a random direction splits N(0, I) inputs evenly, independent of the labels
        y = torch.cat([torch.zeros(50, dtype=torch.long), torch.ones(50, dtype=torch.long)])
        within = 0
        for seed in range(100):
            generator = torch.Generator().manual_seed(seed)
            direction = torch.randn(5, generator=generator, dtype=DTYPE)
            extractor = LinearLayer(torch.stack([direction, -direction]), torch.zeros(2, dtype=DTYPE))
            model = SplitModel([extractor], LinearLayer(torch.eye(2, dtype=DTYPE), torch.zeros(2, dtype=DTYPE)))
            x = torch.randn((100, 5), generator=generator, dtype=DTYPE)
            vector = evaluate_vector(model, x, y, 2)
            within += int(bool(((vector >= 0.3) & (vector <= 0.7)).all()))
        assert within >= 95


def small_model_predictions(model: SplitModel, x: torch.Tensor) -> torch.Tensor:
    return forward_logits(model, forward_features(model, x)).argmax(dim=1)
