"""Batch normalization layer state and its train / eval / adapt forward passes."""
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, InvariantError
from .nncore import ACTIVATION_DTYPE, STAT_DTYPE, as_feature_batch, batch_mean, batch_var

DEFAULT_EPS = 1e-5

NORMALIZE_RUNNING = "running"
NORMALIZE_BATCH = "batch"


def _check_momentum(eta):
    if not 0.0 <= eta <= 1.0:
        raise InvalidInputError(f"momentum must lie in [0, 1], got {eta}")


@dataclass(frozen=True)
class Train:
    """Normalize with batch statistics, then track them with momentum ``eta``."""

    eta: float = 0.1

    def __post_init__(self):
        _check_momentum(self.eta)


@dataclass(frozen=True)
class Eval:
    """Normalize with the frozen running statistics."""


@dataclass(frozen=True)
class Adapt:
    """Update running statistics with ``eta`` and normalize afterwards.

    ``normalize_with`` picks the statistics used for the output features:
    the freshly updated running statistics (``"running"``) or the batch
    statistics (``"batch"``).
    """

    eta: float
    normalize_with: str = NORMALIZE_RUNNING

    def __post_init__(self):
        _check_momentum(self.eta)
        if self.normalize_with not in (NORMALIZE_RUNNING, NORMALIZE_BATCH):
            raise InvalidInputError(f"unknown normalize_with {self.normalize_with!r}")


@dataclass(frozen=True)
class BatchStats:
    """Normalize with batch statistics without touching the running statistics."""


@dataclass
class BNLayerState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = DEFAULT_EPS
    layer_index: int = 1
    channels: int = field(init=False)

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=ACTIVATION_DTYPE)
        self.beta = np.asarray(self.beta, dtype=ACTIVATION_DTYPE)
        self.running_mean = np.asarray(self.running_mean, dtype=STAT_DTYPE)
        self.running_var = np.asarray(self.running_var, dtype=STAT_DTYPE)
        self.eps = float(self.eps)
        self.channels = self.gamma.shape[0] if self.gamma.ndim == 1 else -1
        self.validate()

    @classmethod
    def fresh(cls, channels, layer_index=1, eps=DEFAULT_EPS):
        return cls(
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            eps=eps,
            layer_index=layer_index,
        )

    def validate(self):
        c = self.channels
        for name in ("gamma", "beta", "running_mean", "running_var"):
            if getattr(self, name).shape != (c,):
                raise InvalidInputError(f"{name} must have shape ({c},)")
        if not self.eps > 0:
            raise InvalidInputError(f"eps must be positive, got {self.eps}")
        if np.any(self.running_var < 0):
            raise InvalidInputError("running variance must be non-negative")

    def copy(self):
        return BNLayerState(
            self.gamma.copy(),
            self.beta.copy(),
            self.running_mean.copy(),
            self.running_var.copy(),
            self.eps,
            self.layer_index,
        )


def bn_normalize(x, mean, var, state):
    """Apply ``gamma * (x - mean) / sqrt(var + eps) + beta`` per channel.

    Computation is in float64; the result keeps the floating dtype of ``x``
    (float32 for ordinary activations).
    """
    mean = np.asarray(mean, dtype=STAT_DTYPE)
    var = np.asarray(var, dtype=STAT_DTYPE)
    if mean.shape != (state.channels,) or var.shape != (state.channels,):
        raise InvalidInputError("statistic vectors do not match the layer's channel count")
    if np.any(var < 0):
        raise InvariantError("negative variance passed to bn_normalize")
    inv_std = (var + state.eps) ** -0.5
    out = state.gamma.astype(STAT_DTYPE) * (x.astype(STAT_DTYPE) - mean) * inv_std
    out += state.beta
    return out.astype(np.result_type(x.dtype, ACTIVATION_DTYPE), copy=False)


def ema_update(running, batch_stat, eta):
    """One step of ``(1 - eta) * running + eta * batch_stat``."""
    return (1.0 - eta) * running + eta * batch_stat


def bn_forward(x, state, mode):
    """Run one BN layer in the given mode, mutating ``state`` for Train/Adapt."""
    x = as_feature_batch(x)
    if x.shape[-1] != state.channels:
        raise InvalidInputError(
            f"BN layer {state.layer_index} expects {state.channels} channels, got {x.shape[-1]}"
        )
    if isinstance(mode, Eval):
        return bn_normalize(x, state.running_mean, state.running_var, state)

    if x.shape[0] * x.shape[1] * x.shape[2] < 2:
        raise InvalidInputError("batch statistics need at least two positions per channel")
    mu = batch_mean(x)
    var = batch_var(x, mu)

    if isinstance(mode, BatchStats):
        return bn_normalize(x, mu, var, state)
    if isinstance(mode, Train):
        out = bn_normalize(x, mu, var, state)
        state.running_mean = ema_update(state.running_mean, mu, mode.eta)
        state.running_var = ema_update(state.running_var, var, mode.eta)
        return out
    if isinstance(mode, Adapt):
        state.running_mean = ema_update(state.running_mean, mu, mode.eta)
        state.running_var = ema_update(state.running_var, var, mode.eta)
        if mode.normalize_with == NORMALIZE_BATCH:
            return bn_normalize(x, mu, var, state)
        return bn_normalize(x, state.running_mean, state.running_var, state)
    raise InvalidInputError(f"unknown BN mode {mode!r}")


def bn_set_stats(state, mean, var):
    mean = np.array(mean, dtype=STAT_DTYPE)
    var = np.array(var, dtype=STAT_DTYPE)
    if mean.shape != (state.channels,) or var.shape != (state.channels,):
        raise InvalidInputError("statistic vectors do not match the layer's channel count")
    if np.any(var < 0):
        raise InvalidInputError("variance must be non-negative")
    state.running_mean = mean
    state.running_var = var
