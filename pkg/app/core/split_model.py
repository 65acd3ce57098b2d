"""
Split model: feature extractor (theta) + final linear classifier (phi)

The extractor is a stack of LinearLayer + ReLU; the classifier is exactly one
LinearLayer, bias included. Exchange operations mutate both models in place
and are only called while both owners are parked at the exchange barrier.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Sequence, Tuple

import torch

from app.core.errors import DimensionError, ValidationError
from app.core.nn import (
    DTYPE,
    LinearLayer,
    linear_backward,
    linear_forward,
    relu,
    relu_backward,
)

logger = logging.getLogger(__name__)

EXTRACTOR = "extractor"
CLASSIFIER = "classifier"


class ExchangeUnit(str, Enum):
    """Which part of the model counterparts hand over to each other"""
    CLASSIFIER = "classifier"
    EXTRACTOR = "extractor"
    WHOLE = "whole"


@dataclass
class SplitModel:
    extractor: List[LinearLayer]
    classifier: LinearLayer

    def __post_init__(self):
        if not self.extractor:
            raise DimensionError("SplitModel needs at least one extractor layer")
        for i in range(1, len(self.extractor)):
            if self.extractor[i].in_features != self.extractor[i - 1].out_features:
                raise DimensionError(
                    f"Extractor layer {i} expects {self.extractor[i].in_features} inputs, "
                    f"previous layer yields {self.extractor[i - 1].out_features}"
                )
        if self.classifier.in_features != self.extractor[-1].out_features:
            raise DimensionError(
                f"Classifier expects {self.classifier.in_features} features, "
                f"extractor yields {self.extractor[-1].out_features}"
            )

    @property
    def input_dim(self) -> int:
        return self.extractor[0].in_features

    @property
    def feature_dim(self) -> int:
        return self.extractor[-1].out_features

    @property
    def num_classes(self) -> int:
        return self.classifier.out_features

    def extractor_parameters(self) -> List[torch.Tensor]:
        return [p for layer in self.extractor for p in layer.parameters()]

    def classifier_parameters(self) -> List[torch.Tensor]:
        return self.classifier.parameters()

    def parameters(self) -> List[torch.Tensor]:
        """All parameter tensors, theta first, in layout order"""
        return self.extractor_parameters() + self.classifier_parameters()

    def clone(self) -> "SplitModel":
        return SplitModel([layer.clone() for layer in self.extractor], self.classifier.clone())


@dataclass
class ExtractorCache:
    """Per-layer inputs and pre-activations kept for the backward pass"""
    inputs: List[torch.Tensor]
    pre_activations: List[torch.Tensor]


def build_split_model(input_dim: int, hidden_dims: Sequence[int], num_classes: int,
                      generator: torch.Generator) -> SplitModel:
    """input -> hidden_dims[0] ReLU -> ... -> hidden_dims[-1] ReLU (theta) -> num_classes (phi)"""
    if not hidden_dims:
        raise ValidationError("hidden_dims must name at least one extractor width")
    widths = [input_dim, *hidden_dims]
    extractor = [LinearLayer.glorot(widths[i], widths[i + 1], generator) for i in range(len(hidden_dims))]
    classifier = LinearLayer.glorot(widths[-1], num_classes, generator)
    return SplitModel(extractor, classifier)


def extractor_forward(model: SplitModel, x: torch.Tensor) -> Tuple[torch.Tensor, ExtractorCache]:
    cache = ExtractorCache(inputs=[], pre_activations=[])
    hidden = x
    for layer in model.extractor:
        cache.inputs.append(hidden)
        pre = linear_forward(hidden, layer)
        cache.pre_activations.append(pre)
        hidden = relu(pre)
    return hidden, cache


def extractor_backward(model: SplitModel, cache: ExtractorCache,
                       dfeatures: torch.Tensor) -> List[torch.Tensor]:
    """Gradients for every extractor tensor, in extractor_parameters() order"""
    grads: List[torch.Tensor] = []
    upstream = dfeatures
    for layer, x, pre in reversed(list(zip(model.extractor, cache.inputs, cache.pre_activations))):
        upstream = relu_backward(pre, upstream)
        upstream, d_weight, d_bias = linear_backward(x, layer, upstream)
        grads[:0] = [d_weight, d_bias]
    return grads


def forward_features(model: SplitModel, x: torch.Tensor) -> torch.Tensor:
    """Apply theta; the output is the batch's feature matrix [B x F]"""
    features, _ = extractor_forward(model, x)
    return features


def forward_logits(model: SplitModel, features: torch.Tensor) -> torch.Tensor:
    """Apply phi"""
    return linear_forward(features, model.classifier)


def classifier_backward(model: SplitModel, features: torch.Tensor,
                        dlogits: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
    """Returns (d_features, [d_weight, d_bias]) for the classifier"""
    dfeatures, d_weight, d_bias = linear_backward(features, model.classifier, dlogits)
    return dfeatures, [d_weight, d_bias]


def predict(model: SplitModel, x: torch.Tensor) -> torch.Tensor:
    """Arg-max class per row (first maximum wins)"""
    return forward_logits(model, forward_features(model, x)).argmax(dim=1)


def _check_classifiers(a: SplitModel, b: SplitModel):
    if a.classifier.weight.shape != b.classifier.weight.shape:
        raise DimensionError(
            f"Cannot exchange classifiers of shape {list(a.classifier.weight.shape)} "
            f"and {list(b.classifier.weight.shape)}"
        )


def _check_extractors(a: SplitModel, b: SplitModel):
    shapes_a = [layer.weight.shape for layer in a.extractor]
    shapes_b = [layer.weight.shape for layer in b.extractor]
    if shapes_a != shapes_b:
        raise DimensionError(f"Cannot exchange extractors with layer shapes {shapes_a} and {shapes_b}")


def swap_classifiers(a: SplitModel, b: SplitModel):
    """a, b <- w(theta_a, phi_b), w(theta_b, phi_a)"""
    _check_classifiers(a, b)
    a.classifier, b.classifier = b.classifier, a.classifier


def swap_extractors(a: SplitModel, b: SplitModel):
    _check_extractors(a, b)
    a.extractor, b.extractor = b.extractor, a.extractor


def swap_whole(a: SplitModel, b: SplitModel):
    _check_extractors(a, b)
    _check_classifiers(a, b)
    swap_extractors(a, b)
    swap_classifiers(a, b)


def exchange(a: SplitModel, b: SplitModel, unit: ExchangeUnit):
    """Pairwise exchange of the given unit"""
    if unit == ExchangeUnit.CLASSIFIER:
        swap_classifiers(a, b)
    elif unit == ExchangeUnit.EXTRACTOR:
        swap_extractors(a, b)
    else:
        swap_whole(a, b)


def adopt(receiver: SplitModel, donor: SplitModel, unit: ExchangeUnit):
    """Copy the donor's unit into the receiver; the donor keeps its own"""
    if unit in (ExchangeUnit.CLASSIFIER, ExchangeUnit.WHOLE):
        _check_classifiers(receiver, donor)
    if unit in (ExchangeUnit.EXTRACTOR, ExchangeUnit.WHOLE):
        _check_extractors(receiver, donor)
    if unit != ExchangeUnit.CLASSIFIER:
        receiver.extractor = [layer.clone() for layer in donor.extractor]
    if unit != ExchangeUnit.EXTRACTOR:
        receiver.classifier = donor.classifier.clone()


@dataclass(frozen=True)
class Segment:
    """One parameter tensor's slot in a flat vector"""
    part: str
    layer: int
    name: str
    shape: Tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class Layout:
    """Segment table; every extractor segment precedes every classifier segment"""
    segments: Tuple[Segment, ...]

    @property
    def size(self) -> int:
        last = self.segments[-1]
        return last.offset + last.size

    def part_range(self, part: str) -> Tuple[int, int]:
        chosen = [s for s in self.segments if s.part == part]
        if not chosen:
            raise ValidationError(f"Layout has no '{part}' segments")
        return chosen[0].offset, chosen[-1].offset + chosen[-1].size


@dataclass
class ParamVector:
    """Flat float64 parameter buffer plus the layout it was flattened with"""
    data: torch.Tensor
    layout: Layout

    def __post_init__(self):
        if self.data.dim() != 1 or self.data.numel() != self.layout.size:
            raise ValidationError(
                f"ParamVector holds {self.data.numel()} entries, layout needs {self.layout.size}"
            )

    def part(self, part: str) -> torch.Tensor:
        """View of the extractor or classifier segment range"""
        start, stop = self.layout.part_range(part)
        return self.data[start:stop]

    def clone(self) -> "ParamVector":
        return ParamVector(self.data.clone(), self.layout)

    def __add__(self, other) -> "ParamVector":
        if isinstance(other, ParamVector):
            if other.layout != self.layout:
                raise ValidationError("Cannot add ParamVectors with different layouts")
            return ParamVector(self.data + other.data, self.layout)
        return ParamVector(self.data + other, self.layout)

    def __mul__(self, scalar: float) -> "ParamVector":
        return ParamVector(self.data * scalar, self.layout)

    __rmul__ = __mul__


def layout_of(model: SplitModel) -> Layout:
    segments = []
    offset = 0
    tensors = [(EXTRACTOR, i, layer) for i, layer in enumerate(model.extractor)]
    tensors.append((CLASSIFIER, 0, model.classifier))
    for part, index, layer in tensors:
        for name, tensor in (("weight", layer.weight), ("bias", layer.bias)):
            segment = Segment(part, index, name, tuple(tensor.shape), offset)
            segments.append(segment)
            offset += segment.size
    return Layout(tuple(segments))


def flatten(model: SplitModel) -> ParamVector:
    data = torch.cat([p.reshape(-1) for p in model.parameters()]).to(DTYPE)
    return ParamVector(data, layout_of(model))


def unflatten(vector: ParamVector, template: SplitModel) -> SplitModel:
    """Fresh model with the template's architecture and the vector's values"""
    expected = layout_of(template)
    if vector.layout != expected:
        raise ValidationError("ParamVector layout does not match the template model")

    def take(segment: Segment) -> torch.Tensor:
        return vector.data[segment.offset:segment.offset + segment.size].clone().reshape(segment.shape)

    segments = iter(expected.segments)
    extractor = []
    for _ in template.extractor:
        weight, bias = take(next(segments)), take(next(segments))
        extractor.append(LinearLayer(weight, bias))
    classifier = LinearLayer(take(next(segments)), take(next(segments)))
    return SplitModel(extractor, classifier)
