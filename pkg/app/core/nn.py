"""
Dense numeric kernel for split-model training

Every gradient here is written out analytically; autograd is never used.
Tensors are 64-bit CPU tensors. Operations are pure except ``sgd_step``,
which updates the parameter list it is handed in place.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import torch

from app.config import Config
from app.core.errors import DimensionError, ValidationError

logger = logging.getLogger(__name__)

DTYPE = torch.float64


def as_tensor(data, shape: Optional[Sequence[int]] = None, checked: Optional[bool] = None) -> torch.Tensor:
    """Build a float64 tensor, optionally reshaped and checked for NaN/Inf"""
    tensor = torch.as_tensor(data, dtype=DTYPE)
    if shape is not None:
        expected = math.prod(shape)
        if expected != tensor.numel():
            raise DimensionError(f"Shape {list(shape)} needs {expected} entries, got {tensor.numel()}")
        tensor = tensor.reshape(tuple(shape))
    if checked is None:
        checked = Config.CHECKED_MODE
    if checked:
        check_finite(tensor)
    return tensor


def check_finite(tensor: torch.Tensor, name: str = "tensor"):
    """Reject NaN and infinite entries"""
    if not bool(torch.isfinite(tensor).all()):
        raise ValidationError(f"{name} contains NaN or infinite entries")


def check_labels(labels: torch.Tensor, num_classes: int, batch_size: int):
    """Labels must be a 1-D integer vector of class ids below num_classes"""
    if labels.dim() != 1 or labels.shape[0] != batch_size:
        raise DimensionError(f"Expected {batch_size} labels, got shape {list(labels.shape)}")
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise ValidationError(f"Labels must lie in [0, {num_classes}), got range "
                              f"[{int(labels.min())}, {int(labels.max())}]")


@dataclass
class LinearLayer:
    """Fully connected layer: weight [out x in], bias [out]"""
    weight: torch.Tensor
    bias: torch.Tensor

    def __post_init__(self):
        if self.weight.dim() != 2 or self.bias.dim() != 1:
            raise DimensionError(
                f"LinearLayer needs a 2-D weight and 1-D bias, got {list(self.weight.shape)} "
                f"and {list(self.bias.shape)}"
            )
        if self.bias.shape[0] != self.weight.shape[0]:
            raise DimensionError(
                f"Bias length {self.bias.shape[0]} does not match {self.weight.shape[0]} outputs"
            )

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> List[torch.Tensor]:
        return [self.weight, self.bias]

    def clone(self) -> "LinearLayer":
        return LinearLayer(self.weight.clone(), self.bias.clone())

    @classmethod
    def glorot(cls, in_features: int, out_features: int, generator: torch.Generator) -> "LinearLayer":
        """Uniform Glorot weights from the run's generator; zero bias"""
        limit = math.sqrt(6.0 / (in_features + out_features))
        weight = torch.rand((out_features, in_features), generator=generator, dtype=DTYPE)
        weight = weight * (2.0 * limit) - limit
        return cls(weight, torch.zeros(out_features, dtype=DTYPE))


@dataclass
class GradBundle:
    """Gradient tensors, one per parameter tensor and in the same order"""
    tensors: List[torch.Tensor]

    def __len__(self) -> int:
        return len(self.tensors)

    def __iter__(self) -> Iterator[torch.Tensor]:
        return iter(self.tensors)

    def __getitem__(self, index: int) -> torch.Tensor:
        return self.tensors[index]

    def check_matches(self, params: Sequence[torch.Tensor]):
        if len(params) != len(self.tensors):
            raise DimensionError(f"{len(self.tensors)} gradients for {len(params)} parameters")
        for i, (param, grad) in enumerate(zip(params, self.tensors)):
            if param.shape != grad.shape:
                raise DimensionError(
                    f"Gradient {i} has shape {list(grad.shape)}, parameter has {list(param.shape)}"
                )

    def add(self, other: "GradBundle", scale: float = 1.0) -> "GradBundle":
        """Elementwise self + scale * other"""
        other.check_matches(self.tensors)
        return GradBundle([a + scale * b for a, b in zip(self.tensors, other.tensors)])

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor]) -> "GradBundle":
        return cls([torch.zeros_like(p) for p in params])


@dataclass
class ClassFeatures:
    """Per-class feature table [C x F] with a presence flag per class"""
    values: torch.Tensor
    present: torch.Tensor

    def __post_init__(self):
        if self.values.dim() != 2 or self.present.shape != (self.values.shape[0],):
            raise DimensionError(
                f"ClassFeatures needs values [C x F] and C flags, got {list(self.values.shape)} "
                f"and {list(self.present.shape)}"
            )

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.values.shape[1]

    def is_set(self, class_id: int) -> bool:
        return bool(self.present[class_id])

    def clone(self) -> "ClassFeatures":
        return ClassFeatures(self.values.clone(), self.present.clone())

    @classmethod
    def empty(cls, num_classes: int, feature_dim: int) -> "ClassFeatures":
        return cls(torch.zeros((num_classes, feature_dim), dtype=DTYPE),
                   torch.zeros(num_classes, dtype=torch.bool))


def linear_forward(x: torch.Tensor, layer: LinearLayer) -> torch.Tensor:
    """out[b][o] = sum_i x[b][i] * W[o][i] + bias[o]"""
    if x.dim() != 2 or x.shape[1] != layer.in_features:
        raise DimensionError(
            f"Input of shape {list(x.shape)} does not fit a layer with {layer.in_features} inputs"
        )
    return x @ layer.weight.T + layer.bias


def linear_backward(x: torch.Tensor, layer: LinearLayer,
                    upstream: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Returns (d_input, d_weight, d_bias)"""
    if upstream.shape != (x.shape[0], layer.out_features):
        raise DimensionError(
            f"Upstream gradient {list(upstream.shape)} does not match output "
            f"[{x.shape[0]}, {layer.out_features}]"
        )
    d_weight = upstream.T @ x
    d_bias = upstream.sum(dim=0)
    d_input = upstream @ layer.weight
    return d_input, d_weight, d_bias


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.clamp_min(x, 0.0)


def relu_backward(x: torch.Tensor, upstream: torch.Tensor) -> torch.Tensor:
    """Zero the upstream gradient wherever the forward input was <= 0"""
    if x.shape != upstream.shape:
        raise DimensionError(f"relu_backward shapes differ: {list(x.shape)} vs {list(upstream.shape)}")
    return torch.where(x > 0, upstream, torch.zeros_like(upstream))


def softmax(logits: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax, stabilised by max subtraction"""
    shifted = logits - logits.max(dim=1, keepdim=True).values
    exp = torch.exp(shifted)
    return exp / exp.sum(dim=1, keepdim=True)


def softmax_cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> Tuple[float, torch.Tensor]:
    """
    Batch-mean cross-entropy and its gradient with respect to the logits.

    dlogits = (softmax - onehot) / B
    """
    if logits.dim() != 2:
        raise DimensionError(f"Logits must be [B x C], got {list(logits.shape)}")
    batch_size, num_classes = logits.shape
    check_labels(labels, num_classes, batch_size)

    shifted = logits - logits.max(dim=1, keepdim=True).values
    log_norm = torch.log(torch.exp(shifted).sum(dim=1, keepdim=True))
    log_probs = shifted - log_norm
    rows = torch.arange(batch_size)
    loss = -log_probs[rows, labels].mean()

    dlogits = torch.exp(log_probs)
    dlogits[rows, labels] -= 1.0
    dlogits /= batch_size
    return float(loss), dlogits


def restricted_softmax_cross_entropy(logits: torch.Tensor, labels: torch.Tensor,
                                     class_scale: torch.Tensor) -> Tuple[float, torch.Tensor]:
    """
    Cross-entropy over column-scaled logits (restricted softmax).

    class_scale[c] is the restriction factor for locally missing classes and 1
    elsewhere; the gradient is mapped back through the same scaling.
    """
    if class_scale.shape != (logits.shape[1],):
        raise DimensionError(
            f"class_scale has shape {list(class_scale.shape)}, logits have {logits.shape[1]} classes"
        )
    loss, dscaled = softmax_cross_entropy(logits * class_scale, labels)
    return loss, dscaled * class_scale


def l2_feature_loss(features: torch.Tensor, labels: torch.Tensor,
                    global_features: ClassFeatures) -> Tuple[float, torch.Tensor]:
    """
    Feature alignment loss.

    loss = sum over classes c present in the batch (and set globally) of
    ||mean of class-c features - global_features[c]||^2. Each member of class c
    receives 2 * (mean - global) / |B_c| as its gradient. Classes whose global
    entry is unset contribute nothing.
    """
    if features.dim() != 2:
        raise DimensionError(f"Features must be [B x F], got {list(features.shape)}")
    if features.shape[1] != global_features.feature_dim:
        raise DimensionError(
            f"Feature width {features.shape[1]} does not match global features "
            f"width {global_features.feature_dim}"
        )
    batch_size = features.shape[0]
    num_classes = global_features.num_classes
    check_labels(labels, num_classes, batch_size)

    onehot = torch.nn.functional.one_hot(labels, num_classes).to(DTYPE)
    counts = onehot.sum(dim=0)
    active = (counts > 0) & global_features.present
    safe_counts = counts.clamp_min(1.0).unsqueeze(1)
    means = (onehot.T @ features) / safe_counts
    diff = torch.where(active.unsqueeze(1), means - global_features.values,
                       torch.zeros_like(means))

    loss = float((diff * diff).sum())
    dfeatures = onehot @ (2.0 * diff / safe_counts)
    return loss, dfeatures


def proximal_term(params: Sequence[torch.Tensor], anchor: Sequence[torch.Tensor],
                  mu: float) -> Tuple[float, GradBundle]:
    """(mu / 2) * ||w - w_anchor||^2 and its gradient mu * (w - w_anchor)"""
    if len(params) != len(anchor):
        raise DimensionError(f"{len(params)} parameters against {len(anchor)} anchor tensors")
    loss = 0.0
    grads = []
    for param, ref in zip(params, anchor):
        if param.shape != ref.shape:
            raise DimensionError(f"Parameter {list(param.shape)} vs anchor {list(ref.shape)}")
        delta = param - ref
        loss += float((delta * delta).sum())
        grads.append(mu * delta)
    return 0.5 * mu * loss, GradBundle(grads)


def sgd_step(params: Sequence[torch.Tensor], grads: GradBundle, lr: float,
             checked: Optional[bool] = None) -> Sequence[torch.Tensor]:
    """
    p <- p - lr * g for every parameter, in place.

    In checked mode a parameter that leaves the finite range raises
    ValidationError, so a diverging client aborts its round.
    """
    grads.check_matches(params)
    if checked is None:
        checked = Config.CHECKED_MODE
    for i, (param, grad) in enumerate(zip(params, grads)):
        param.sub_(grad, alpha=lr)
        if checked:
            check_finite(param, f"parameter {i} after SGD step (lr={lr})")
    return params


def finite_difference_grad(loss_fn: Callable[[Sequence[torch.Tensor]], float],
                           params: Sequence[torch.Tensor], eps: float = 1e-6) -> GradBundle:
    """
    Central-difference gradient of loss_fn at params.

    Entries are perturbed in place and restored before returning.
    """
    grads = []
    for param in params:
        flat = param.view(-1)
        grad = torch.zeros_like(flat)
        for i in range(flat.numel()):
            original = float(flat[i])
            flat[i] = original + eps
            plus = float(loss_fn(params))
            flat[i] = original - eps
            minus = float(loss_fn(params))
            flat[i] = original
            grad[i] = (plus - minus) / (2.0 * eps)
        grads.append(grad.view_as(param))
    return GradBundle(grads)


def relative_error(analytic: GradBundle, numeric: GradBundle) -> float:
    """max |a - n| / max(max |a|, max |n|), guarded against all-zero bundles"""
    numeric.check_matches(analytic.tensors)
    worst_diff = 0.0
    scale = 0.0
    for a, n in zip(analytic, numeric):
        if a.numel() == 0:
            continue
        worst_diff = max(worst_diff, float((a - n).abs().max()))
        scale = max(scale, float(a.abs().max()), float(n.abs().max()))
    if scale == 0.0:
        return worst_diff
    return worst_diff / scale
