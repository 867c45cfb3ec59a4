"""Dense channels-last tensor helpers and forward-only layer evaluation.

Feature batches are plain ``numpy`` arrays of shape ``(B, H, W, C)``.
Activations are kept as float32; every per-channel statistic is
accumulated in float64.
"""
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

ACTIVATION_DTYPE = np.float32
STAT_DTYPE = np.float64


def as_feature_batch(x, dtype=None):
    """Validate ``x`` as a rank-4 finite feature batch and return it as an array."""
    x = np.asarray(x)
    if dtype is not None:
        x = x.astype(dtype, copy=False)
    if x.ndim != 4:
        raise InvalidInputError(f"expected a (B, H, W, C) array, got shape {x.shape}")
    if x.shape[-1] < 1:
        raise InvalidInputError("feature batch has no channels")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("feature batch contains NaN or Inf")
    return x


def _check_channel_vector(v, channels, name):
    v = np.asarray(v, dtype=STAT_DTYPE)
    if v.shape != (channels,):
        raise InvalidInputError(f"{name} must have shape ({channels},), got {v.shape}")
    return v


def batch_mean(x):
    """Per-channel mean over batch and spatial positions."""
    x = as_feature_batch(x)
    if x.shape[0] * x.shape[1] * x.shape[2] == 0:
        raise InvalidInputError("cannot take statistics of an empty batch")
    return x.reshape(-1, x.shape[-1]).astype(STAT_DTYPE).mean(axis=0)


def batch_var(x, mean):
    """Biased (divide-by-N) per-channel variance around ``mean``."""
    x = as_feature_batch(x)
    if x.shape[0] * x.shape[1] * x.shape[2] == 0:
        raise InvalidInputError("cannot take statistics of an empty batch")
    mean = _check_channel_vector(mean, x.shape[-1], "mean")
    d = x.reshape(-1, x.shape[-1]).astype(STAT_DTYPE) - mean
    return (d * d).mean(axis=0)


@dataclass
class LinearLayer:
    """Per-pixel (1x1) affine map ``y = W x + b``.

    ``weight`` has shape ``(c_out, c_in)``.
    """

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=ACTIVATION_DTYPE)
        self.bias = np.asarray(self.bias, dtype=ACTIVATION_DTYPE)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise InvalidInputError(
                f"inconsistent linear layer shapes {self.weight.shape}, {self.bias.shape}"
            )

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @classmethod
    def init(cls, c_in, c_out, rng):
        std = np.sqrt(2.0 / c_in)
        w = rng.normal(0.0, std, size=(c_out, c_in))
        return cls(w, np.zeros(c_out))


def linear_forward(layer, x):
    x = as_feature_batch(x)
    if x.shape[-1] != layer.weight.shape[1]:
        raise InvalidInputError(
            f"linear layer expects {layer.weight.shape[1]} channels, got {x.shape[-1]}"
        )
    # Result dtype follows the widest of input and parameters.
    return x @ layer.weight.T + layer.bias


def relu(x):
    return np.maximum(x, 0)


def softmax_channels(x):
    x = np.asarray(x)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
