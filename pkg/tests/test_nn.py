#!/usr/bin/env python3
"""
Tests for the dense numeric kernel: layers, losses, analytic gradients, SGD
"""

import math

import pytest
import torch

from app.config import Config
from app.core.errors import DimensionError, ValidationError
from app.core.nn import (
    DTYPE,
    ClassFeatures,
    GradBundle,
    LinearLayer,
    as_tensor,
    finite_difference_grad,
    l2_feature_loss,
    linear_forward,
    proximal_term,
    relative_error,
    relu,
    relu_backward,
    restricted_softmax_cross_entropy,
    sgd_step,
    softmax,
    softmax_cross_entropy,
)
from tests.conftest import GRAD_TOLERANCE, random_tensor

SEEDS = list(range(20))


def t(data):
    return torch.tensor(data, dtype=DTYPE)


def labels_for(seed: int, batch: int, classes: int) -> torch.Tensor:
    generator = torch.Generator().manual_seed(1000 + seed)
    return torch.randint(0, classes, (batch,), generator=generator)


class TestTensors:
    """Tensor construction in checked mode"""

    def test_shape_must_match_entries(self):
        with pytest.raises(DimensionError):
            as_tensor([1.0, 2.0, 3.0], shape=[2, 2])

    def test_reshapes_row_major(self):
        assert as_tensor([1, 2, 3, 4], shape=[2, 2]).tolist() == [[1.0, 2.0], [3.0, 4.0]]

    @pytest.mark.parametrize("bad", [float("nan"), float("inf"), -float("inf")])
    def test_checked_mode_rejects_non_finite(self, bad):
        with pytest.raises(ValidationError):
            as_tensor([1.0, bad], checked=True)

    def test_unchecked_mode_accepts_non_finite(self):
        assert math.isnan(float(as_tensor([float("nan")], checked=False)[0]))

    def test_layer_shapes_must_agree(self):
        with pytest.raises(DimensionError):
            LinearLayer(torch.zeros((2, 3), dtype=DTYPE), torch.zeros(3, dtype=DTYPE))


class TestLinearAndRelu:
    """Forward passes with hand-checked values"""

    @pytest.mark.parametrize("x,weight,bias,expected", [
        ([[1, 2]], [[1, 0], [0, 1]], [0, 0], [[1, 2]]),
        ([[0, 0]], [[5, -1], [2, 7]], [3, 4], [[3, 4]]),
        ([[1, 1]], [[2, 3]], [1], [[6]]),
    ])
    def test_linear_forward(self, x, weight, bias, expected):
        out = linear_forward(t(x), LinearLayer(t(weight), t(bias)))
        assert out.tolist() == expected

    def test_linear_forward_rejects_width_mismatch(self):
        with pytest.raises(DimensionError):
            linear_forward(t([[1, 2, 3]]), LinearLayer(t([[1, 0]]), t([0])))

    def test_relu(self):
        assert relu(t([-1, 0, 2])).tolist() == [0, 0, 2]

    def test_relu_backward(self):
        assert relu_backward(t([-1, 2]), t([5, 5])).tolist() == [0, 5]

    def test_relu_identity_on_positive_inputs(self):
        x = t([0.5, 1.0, 3.0])
        assert torch.equal(relu(x), x)
        assert torch.equal(relu_backward(x, x), x)


class TestSoftmaxCrossEntropy:
    """Cross-entropy value and gradient"""

    def test_uniform_logits(self):
        loss, _ = softmax_cross_entropy(t([[0, 0]]), torch.tensor([0]))
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_saturated_correct_logit(self):
        loss, dlogits = softmax_cross_entropy(t([[100, 0]]), torch.tensor([0]))
        assert loss == pytest.approx(0.0, abs=1e-12)
        assert float(dlogits.abs().max()) < 1e-12

    def test_label_out_of_range(self):
        with pytest.raises(ValidationError):
            softmax_cross_entropy(t([[0, 0]]), torch.tensor([2]))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_softmax_rows_sum_to_one_and_gradient_rows_to_zero(self, seed):
        logits = random_tensor((3, 4), seed, scale=3.0)
        _, dlogits = softmax_cross_entropy(logits, labels_for(seed, 3, 4))
        assert torch.allclose(softmax(logits).sum(dim=1), torch.ones(3, dtype=DTYPE), atol=1e-12)
        assert float(dlogits.sum(dim=1).abs().max()) < 1e-12

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient_matches_finite_differences(self, seed):
        logits = random_tensor((3, 4), seed)
        labels = labels_for(seed, 3, 4)
        _, dlogits = softmax_cross_entropy(logits, labels)
        numeric = finite_difference_grad(lambda p: softmax_cross_entropy(p[0], labels)[0], [logits])
        assert relative_error(GradBundle([dlogits]), numeric) < GRAD_TOLERANCE


class TestRestrictedSoftmax:
    """Column-scaled cross-entropy used by FedRS"""

    def test_unit_scale_is_plain_cross_entropy(self):
        logits = random_tensor((5, 3), 4)
        labels = labels_for(4, 5, 3)
        plain = softmax_cross_entropy(logits, labels)
        restricted = restricted_softmax_cross_entropy(logits, labels, torch.ones(3, dtype=DTYPE))
        assert plain[0] == restricted[0]
        assert torch.equal(plain[1], restricted[1])

    def test_scale_shape_checked(self):
        with pytest.raises(DimensionError):
            restricted_softmax_cross_entropy(random_tensor((2, 3)), torch.tensor([0, 1]),
                                             torch.ones(2, dtype=DTYPE))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient_matches_finite_differences(self, seed):
        logits = random_tensor((4, 5), seed)
        labels = labels_for(seed, 4, 5)
        scale = t([1.0, 0.5, 1.0, 0.1, 0.5])
        _, dlogits = restricted_softmax_cross_entropy(logits, labels, scale)
        numeric = finite_difference_grad(
            lambda p: restricted_softmax_cross_entropy(p[0], labels, scale)[0], [logits])
        assert relative_error(GradBundle([dlogits]), numeric) < GRAD_TOLERANCE


class TestFeatureAlignmentLoss:
    """Squared distance between per-class batch means and global features"""

    def test_aligned_batch_has_zero_loss(self):
        features = t([[1, 2], [3, 4], [5, 6]])
        labels = torch.tensor([0, 0, 1])
        table = ClassFeatures(t([[2, 3], [5, 6]]), torch.tensor([True, True]))
        loss, dfeatures = l2_feature_loss(features, labels, table)
        assert loss == 0.0
        assert float(dfeatures.abs().max()) == 0.0

    def test_single_sample(self):
        table = ClassFeatures(t([[0, 0], [9, 9]]), torch.tensor([True, True]))
        loss, dfeatures = l2_feature_loss(t([[1, 0]]), torch.tensor([0]), table)
        assert loss == 1.0
        assert dfeatures.tolist() == [[2.0, 0.0]]

    def test_unset_classes_are_skipped(self):
        table = ClassFeatures(t([[0, 0], [0, 0]]), torch.tensor([False, True]))
        loss, dfeatures = l2_feature_loss(t([[1, 0], [0, 0]]), torch.tensor([0, 1]), table)
        assert loss == 0.0
        assert float(dfeatures.abs().max()) == 0.0

    def test_feature_width_checked(self):
        table = ClassFeatures.empty(2, 3)
        with pytest.raises(DimensionError):
            l2_feature_loss(t([[1, 0]]), torch.tensor([0]), table)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient_matches_finite_differences(self, seed):
        features = random_tensor((6, 3), seed)
        labels = labels_for(seed, 6, 4)
        table = ClassFeatures(random_tensor((4, 3), seed + 50), torch.tensor([True, True, False, True]))
        _, dfeatures = l2_feature_loss(features, labels, table)
        numeric = finite_difference_grad(lambda p: l2_feature_loss(p[0], labels, table)[0], [features])
        assert relative_error(GradBundle([dfeatures]), numeric) < GRAD_TOLERANCE


class TestProximalTerm:
    """(mu / 2) ||w - anchor||^2"""

    def test_value(self):
        loss, grads = proximal_term([t([1.0, 2.0])], [t([0.0, 0.0])], 2.0)
        assert loss == 5.0
        assert grads[0].tolist() == [2.0, 4.0]

    def test_anchor_shape_checked(self):
        with pytest.raises(DimensionError):
            proximal_term([t([1.0, 2.0])], [t([1.0])], 1.0)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient_matches_finite_differences(self, seed):
        params = [random_tensor((3, 2), seed), random_tensor((2,), seed + 1)]
        anchor = [random_tensor((3, 2), seed + 2), random_tensor((2,), seed + 3)]
        _, grads = proximal_term(params, anchor, 0.7)
        numeric = finite_difference_grad(lambda p: proximal_term(p, anchor, 0.7)[0], params)
        assert relative_error(grads, numeric) < GRAD_TOLERANCE


class TestSgdAndFiniteDifferences:
    """Stepper and the gradient oracle itself"""

    def test_single_step(self):
        params = [t([1.0])]
        sgd_step(params, GradBundle([t([2.0])]), 0.5)
        assert params[0].tolist() == [0.0]

    @pytest.mark.parametrize("lr,grad", [(0.0, [3.0, -1.0]), (0.1, [0.0, 0.0])])
    def test_identity_cases(self, lr, grad):
        params = [t([1.5, -2.5])]
        sgd_step(params, GradBundle([t(grad)]), lr)
        assert params[0].tolist() == [1.5, -2.5]

    def test_step_shape_checked(self):
        with pytest.raises(DimensionError):
            sgd_step([t([1.0, 2.0])], GradBundle([t([1.0])]), 0.1)

    def test_checked_step_rejects_overflow(self):
        params = [t([1e308, 0.0])]
        with pytest.raises(ValidationError):
            sgd_step(params, GradBundle([t([-1e308, 0.0])]), 10.0, checked=True)

    def test_unchecked_step_lets_overflow_through(self):
        params = [t([1e308])]
        sgd_step(params, GradBundle([t([-1e308])]), 10.0, checked=False)
        assert math.isinf(float(params[0][0]))

    def test_checked_mode_follows_config(self, monkeypatch):
        monkeypatch.setattr(Config, "CHECKED_MODE", True)
        with pytest.raises(ValidationError):
            sgd_step([t([0.0])], GradBundle([t([float("nan")])]), 0.1)

    def test_quadratic(self):
        grads = finite_difference_grad(lambda p: float((p[0] ** 2).sum()), [t([3.0])], eps=1e-5)
        assert float(grads[0][0]) == pytest.approx(6.0, abs=1e-6)

    def test_constant_function(self):
        grads = finite_difference_grad(lambda p: 4.2, [t([1.0, 2.0]), t([[3.0]])])
        assert all(float(g.abs().max()) == 0.0 for g in grads)

    def test_parameters_restored(self):
        params = [t([1.0, 2.0])]
        finite_difference_grad(lambda p: float(p[0].sum()), params)
        assert params[0].tolist() == [1.0, 2.0]
