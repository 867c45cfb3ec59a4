"""Toy per-pixel segmentation model: an ordered list of BN / linear / ReLU layers
ending in a softmax head.

BN layers are numbered 1..L in forward order; that number is the layer
index used by the layer-wise momentum weighting.
"""
import copy
from dataclasses import dataclass

import numpy as np

from .batchnorm import DEFAULT_EPS, BNLayerState, Eval, bn_forward
from .errors import InvalidInputError
from .nncore import LinearLayer, as_feature_batch, linear_forward, relu, softmax_channels


class ReLU:
    def __eq__(self, other):
        return isinstance(other, ReLU)

    def __repr__(self):
        return "ReLU()"


class SoftmaxHead:
    def __eq__(self, other):
        return isinstance(other, SoftmaxHead)

    def __repr__(self):
        return "SoftmaxHead()"


@dataclass(frozen=True)
class Architecture:
    """Descriptor from which the default layer stack is built.

    With ``input_bn`` the stack starts with a BN layer acting directly on the
    image channels. Each hidden width adds ``Linear -> BN -> ReLU``; a final
    ``Linear`` maps to class logits.
    """

    in_channels: int = 3
    hidden: tuple = (16, 16)
    num_classes: int = 4
    input_bn: bool = True
    eps: float = DEFAULT_EPS

    def to_dict(self):
        return {
            "in_channels": self.in_channels,
            "hidden": list(self.hidden),
            "num_classes": self.num_classes,
            "input_bn": self.input_bn,
            "eps": self.eps,
        }


class Model:
    def __init__(self, layers, num_classes, architecture=None):
        self.layers = list(layers)
        self.num_classes = int(num_classes)
        self.architecture = architecture
        self.provenance = {}
        self._check()

    @classmethod
    def build(cls, arch, seed=0):
        rng = np.random.default_rng(seed)
        layers = []
        bn_idx = 0
        if arch.input_bn:
            bn_idx += 1
            layers.append(BNLayerState.fresh(arch.in_channels, bn_idx, arch.eps))
        width = arch.in_channels
        for h in arch.hidden:
            layers.append(LinearLayer.init(width, h, rng))
            bn_idx += 1
            layers.append(BNLayerState.fresh(h, bn_idx, arch.eps))
            layers.append(ReLU())
            width = h
        layers.append(LinearLayer.init(width, arch.num_classes, rng))
        layers.append(SoftmaxHead())
        return cls(layers, arch.num_classes, arch)

    def _check(self):
        heads = [i for i, l in enumerate(self.layers) if isinstance(l, SoftmaxHead)]
        if heads != [len(self.layers) - 1]:
            raise InvalidInputError("model needs exactly one SoftmaxHead, as its last layer")
        for expected, bn in enumerate(self.bn_layers, start=1):
            if bn.layer_index != expected:
                raise InvalidInputError(
                    f"BN layers must be numbered 1..L in order; found {bn.layer_index} at {expected}"
                )

    @property
    def bn_layers(self):
        return [l for l in self.layers if isinstance(l, BNLayerState)]

    @property
    def num_bn_layers(self):
        return len(self.bn_layers)

    @property
    def in_channels(self):
        for layer in self.layers:
            if isinstance(layer, BNLayerState):
                return layer.channels
            if isinstance(layer, LinearLayer):
                return layer.in_channels
        raise InvalidInputError("model has no layer with a defined input width")

    def copy(self):
        return copy.deepcopy(self)

    def forward(self, x, bn_mode=None, on_bn_input=None):
        """Return per-pixel class probabilities for the batch ``x``.

        ``bn_mode`` is a single BN mode applied to every BN layer, a callable
        mapping a BN layer index to its mode, or ``None`` for Eval.
        ``on_bn_input(layer_index, features)`` is called with each BN layer's
        input before the layer runs.
        """
        h = as_feature_batch(x)
        if h.shape[-1] != self.in_channels:
            raise InvalidInputError(
                f"model expects {self.in_channels} input channels, got {h.shape[-1]}"
            )
        if bn_mode is None:
            bn_mode = Eval()
        for layer in self.layers:
            if isinstance(layer, BNLayerState):
                if on_bn_input is not None:
                    on_bn_input(layer.layer_index, h)
                mode = bn_mode(layer.layer_index) if callable(bn_mode) else bn_mode
                h = bn_forward(h, layer, mode)
            elif isinstance(layer, LinearLayer):
                h = linear_forward(layer, h)
            elif isinstance(layer, ReLU):
                h = relu(h)
            elif isinstance(layer, SoftmaxHead):
                h = softmax_channels(h)
        return h

    def predict(self, x, bn_mode=None):
        """Argmax label map ``(B, H, W)``."""
        return self.forward(x, bn_mode).argmax(axis=-1)

    def parameters(self):
        """Yield ``(layer_position, name, array)`` for every trainable array."""
        for pos, layer in enumerate(self.layers):
            if isinstance(layer, LinearLayer):
                yield pos, "weight", layer.weight
                yield pos, "bias", layer.bias
            elif isinstance(layer, BNLayerState):
                yield pos, "gamma", layer.gamma
                yield pos, "beta", layer.beta


def single_bn_model(channels, eps=DEFAULT_EPS):
    """A model whose only BN layer acts directly on the input (``C`` classes)."""
    return Model([BNLayerState.fresh(channels, 1, eps), SoftmaxHead()], channels)
