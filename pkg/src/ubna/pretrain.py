"""Supervised source-domain pre-training of the toy segmenter.

Plain SGD on a class-weighted pixel-wise cross-entropy, with gradients
derived by hand through softmax, linear, ReLU and batch-statistics BN
layers. BN running statistics are tracked with an EMA during training and
become the starting point for later adaptation.
"""
import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .batchnorm import BatchStats, BNLayerState, Train, bn_forward
from .errors import InvalidInputError, TrainingFailureError
from .nncore import LinearLayer, batch_mean, batch_var
from .model import ReLU, SoftmaxHead

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass
class PretrainConfig:
    steps: int = 600
    learning_rate: float = 0.3
    batch_size: int = 4
    bn_momentum: float = 0.1
    # None means uniform weights; "inverse_frequency" derives them from the source labels
    class_weights: object = None
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise InvalidInputError("steps must be non-negative")
        if not self.learning_rate >= 0:
            raise InvalidInputError("learning_rate must be non-negative")
        if self.batch_size < 2:
            raise InvalidInputError("batch_size must be at least 2")
        if not 0 < self.bn_momentum <= 1:
            raise InvalidInputError("bn_momentum must lie in (0, 1]")
        if self.class_weights not in (None, "inverse_frequency"):
            w = np.asarray(self.class_weights, dtype=np.float64)
            if w.ndim != 1 or np.any(w < 0) or not np.any(w > 0):
                raise InvalidInputError("class weights must be non-negative and not all zero")
            self.class_weights = tuple(float(v) for v in w)

    def to_dict(self):
        d = asdict(self)
        if isinstance(d["class_weights"], tuple):
            d["class_weights"] = list(d["class_weights"])
        return d

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def resolve_weights(self, num_classes, labels=None):
        if self.class_weights is None:
            return np.ones(num_classes)
        if self.class_weights == "inverse_frequency":
            if labels is None:
                raise InvalidInputError("inverse-frequency weights need the source labels")
            return inverse_frequency_weights(labels, num_classes)
        w = np.asarray(self.class_weights, dtype=np.float64)
        if w.shape != (num_classes,):
            raise InvalidInputError(f"expected {num_classes} class weights, got {w.shape[0]}")
        return w


def inverse_frequency_weights(labels, num_classes):
    """Weights proportional to 1/frequency, normalized to mean 1 over present classes."""
    counts = np.bincount(np.asarray(labels).ravel(), minlength=num_classes).astype(np.float64)
    w = np.zeros(num_classes)
    present = counts > 0
    w[present] = 1.0 / counts[present]
    return w * present.sum() / w.sum()


def cross_entropy_loss(probs, labels, weights=None):
    """Class-weighted pixel cross-entropy, averaged over pixels and batch."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    num_classes = probs.shape[-1]
    if labels.shape != probs.shape[:-1]:
        raise InvalidInputError(f"labels {labels.shape} do not match probabilities {probs.shape}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise InvalidInputError("label id outside 0..|S|-1")
    w = np.ones(num_classes) if weights is None else np.asarray(weights, dtype=np.float64)
    p_true = np.take_along_axis(probs, labels[..., None], axis=-1)[..., 0]
    per_pixel = -w[labels] * np.log(np.maximum(p_true, PROB_FLOOR))
    # mean over pixels of each image, then over the batch
    return float(per_pixel.reshape(per_pixel.shape[0], -1).mean(axis=1).mean())


def _forward_cached(model, x, mode):
    """Float64 forward pass that keeps what the backward pass needs.

    ``mode`` is ``Train(eta)`` (updates running statistics) or
    ``BatchStats()``; BN layers always normalize with batch statistics.
    Returns ``(probs, cache, bn_stats)``.
    """
    h = np.asarray(x, dtype=np.float64)
    cache = []
    bn_stats = {}
    for layer in model.layers:
        if isinstance(layer, BNLayerState):
            mu = batch_mean(h)
            var = batch_var(h, mu)
            bn_stats[layer.layer_index] = (mu, var)
            cache.append((h, mu, var))
            h = bn_forward(h, layer, mode)
        elif isinstance(layer, LinearLayer):
            cache.append(h)
            h = h @ layer.weight.T.astype(np.float64) + layer.bias
        elif isinstance(layer, ReLU):
            cache.append(h)
            h = np.maximum(h, 0.0)
        elif isinstance(layer, SoftmaxHead):
            cache.append(None)
            z = h - h.max(axis=-1, keepdims=True)
            e = np.exp(z)
            h = e / e.sum(axis=-1, keepdims=True)
    return h, cache, bn_stats


def _backward(model, cache, probs, labels, weights):
    n = labels.size
    num_classes = probs.shape[-1]
    onehot = np.eye(num_classes)[labels]
    p_true = np.take_along_axis(probs, labels[..., None], axis=-1)
    live = (p_true >= PROB_FLOOR).astype(np.float64)
    grad = weights[labels][..., None] * live * (probs - onehot) / n

    grads = {}
    for pos in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[pos]
        if isinstance(layer, SoftmaxHead):
            continue  # folded into the cross-entropy gradient above
        if isinstance(layer, LinearLayer):
            h = cache[pos]
            g2 = grad.reshape(-1, grad.shape[-1])
            grads[pos, "weight"] = g2.T @ h.reshape(-1, h.shape[-1])
            grads[pos, "bias"] = g2.sum(axis=0)
            grad = grad @ layer.weight.astype(np.float64)
        elif isinstance(layer, ReLU):
            grad = grad * (cache[pos] > 0)
        elif isinstance(layer, BNLayerState):
            h, mu, var = cache[pos]
            shape = h.shape
            h2 = h.reshape(-1, shape[-1])
            g2 = grad.reshape(-1, shape[-1])
            m = h2.shape[0]
            inv_std = 1.0 / np.sqrt(var + layer.eps)
            xhat = (h2 - mu) * inv_std
            grads[pos, "gamma"] = (g2 * xhat).sum(axis=0)
            grads[pos, "beta"] = g2.sum(axis=0)
            dxhat = g2 * layer.gamma.astype(np.float64)
            dx = (inv_std / m) * (
                m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
            )
            grad = dx.reshape(shape)
    return grads


def backward_pass(model, batch, labels, cfg=None, weights=None):
    """Loss and analytic gradients for every Linear weight/bias and BN gamma/beta.

    The forward pass normalizes with batch statistics but leaves the running
    statistics untouched. Gradients are keyed by ``(layer_position, name)``
    and are float64.
    """
    labels = np.asarray(labels)
    if weights is None:
        cfg = cfg or PretrainConfig()
        weights = cfg.resolve_weights(model.num_classes, labels)
    weights = np.asarray(weights, dtype=np.float64)
    probs, cache, _ = _forward_cached(model, batch, BatchStats())
    loss = cross_entropy_loss(probs, labels, weights)
    return loss, _backward(model, cache, probs, labels, weights)


def sgd_step(model, grads, learning_rate):
    for pos, name, value in list(model.parameters()):
        g = grads[pos, name]
        updated = value.astype(np.float64) - learning_rate * g
        setattr(model.layers[pos], name, updated.astype(value.dtype))


@dataclass
class TrainingLog:
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    accuracies: list = field(default_factory=list)
    # per step: {layer_index: (batch_mean, batch_var)}
    batch_stats: list = field(default_factory=list)

    def __len__(self):
        return len(self.steps)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", "accuracy"])
            for row in zip(self.steps, self.losses, self.accuracies):
                w.writerow([row[0], repr(row[1]), repr(row[2])])


def pretrain(model, source, cfg, record_batch_stats=False):
    """Train ``model`` in place on the labelled ``source`` domain for ``cfg.steps`` steps."""
    if not getattr(source, "labeled", False):
        raise InvalidInputError("pre-training needs a labelled source domain")
    images, labels = source.materialize()
    if labels is None:
        raise InvalidInputError("pre-training needs a labelled source domain")
    if len(images) < cfg.batch_size:
        raise InvalidInputError("source domain is smaller than one batch")
    weights = cfg.resolve_weights(model.num_classes, labels)
    rng = np.random.default_rng(cfg.seed)
    mode = Train(cfg.bn_momentum)
    out = TrainingLog()

    for step in range(1, cfg.steps + 1):
        idx = np.sort(rng.choice(len(images), size=cfg.batch_size, replace=False))
        x, y = images[idx], labels[idx]
        probs, cache, stats = _forward_cached(model, x, mode)
        loss = cross_entropy_loss(probs, y, weights)
        if not np.isfinite(loss):
            raise TrainingFailureError(step)
        grads = _backward(model, cache, probs, y, weights)
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingFailureError(step, "non-finite gradient")
        with np.errstate(over="ignore", invalid="ignore"):
            sgd_step(model, grads, cfg.learning_rate)
        if not all(np.all(np.isfinite(a)) for _, _, a in model.parameters()):
            raise TrainingFailureError(step, "parameters overflowed")
        acc = float((probs.argmax(axis=-1) == y).mean())
        out.steps.append(step)
        out.losses.append(loss)
        out.accuracies.append(acc)
        if record_batch_stats:
            out.batch_stats.append(stats)
        if step % 200 == 0:
            log.debug("step %d loss %.4f acc %.4f", step, loss, acc)

    if cfg.steps:
        model.provenance["pretrain"] = {"config_digest": cfg.digest(), "steps": cfg.steps}
    return out
