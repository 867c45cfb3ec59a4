"""Gradient-free adaptation of BN statistics to a target domain.

The running statistics of every BN layer are pulled towards the target
batch statistics with a momentum that decays exponentially with the
adaptation step and, optionally, with the depth of the layer::

    eta(step, layer) = eta0 * exp(-step * alpha_batch) * exp(-layer * alpha_layer)

Weights, biases, gamma and beta are never touched. Also provides the AdaBN
(full recomputation) and batch-statistics-at-test baselines.
"""
import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .batchnorm import NORMALIZE_RUNNING, Adapt, BatchStats, bn_set_stats
from .errors import InvalidInputError, ProtocolViolationError
from .nncore import batch_mean, batch_var

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdaptationSchedule:
    eta0: float = 0.1
    alpha_batch: float = 0.08
    alpha_layer: float = 0.0
    num_steps: int = 50
    # index of the first update; with 1 the initial momentum eta0 is never applied
    first_step_index: int = 1

    def __post_init__(self):
        if not 0 < self.eta0 <= 1:
            raise InvalidInputError(f"eta0 must lie in (0, 1], got {self.eta0}")
        if self.alpha_batch < 0 or self.alpha_layer < 0:
            raise InvalidInputError("decay factors must be non-negative")
        if self.num_steps < 0:
            raise InvalidInputError("num_steps must be non-negative")
        if self.first_step_index not in (0, 1):
            raise InvalidInputError("first_step_index must be 0 or 1")

    @property
    def steps(self):
        return range(self.first_step_index, self.first_step_index + self.num_steps)

    def batch_momentum(self, step):
        return self.eta0 * math.exp(-step * self.alpha_batch)

    def momentum_at(self, step, layer):
        return momentum_at(self, step, layer)

    def to_dict(self):
        return asdict(self)


def momentum_at(schedule, step, layer):
    """Momentum used by BN layer ``layer`` (1-based) at adaptation step ``step``."""
    if step < schedule.first_step_index:
        raise InvalidInputError(f"step {step} precedes the first step {schedule.first_step_index}")
    if layer < 1:
        raise InvalidInputError("BN layers are numbered from 1")
    return (
        schedule.eta0
        * math.exp(-step * schedule.alpha_batch)
        * math.exp(-layer * schedule.alpha_layer)
    )


METHOD_DECAYS = {
    "ubna0": (0.0, 0.0),
    "ubna": (0.08, 0.0),
    "ubna+": (0.08, 0.03),
}


def schedule_for(method, **overrides):
    """Default schedule of a named method (``ubna0``, ``ubna``, ``ubna+``)."""
    try:
        alpha_batch, alpha_layer = METHOD_DECAYS[method]
    except KeyError:
        raise InvalidInputError(f"unknown adaptation method {method!r}") from None
    kw = {"alpha_batch": alpha_batch, "alpha_layer": alpha_layer}
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return AdaptationSchedule(**kw)


# -- protocols -----------------------------------------------------------------


@dataclass(frozen=True)
class Offline:
    """Random batches, uniform without replacement per epoch, reshuffled each epoch."""

    batch_size: int = 6
    seed: int = 0


@dataclass(frozen=True)
class Online:
    """Consecutive frames of a temporally ordered stream; ``frame_period`` in seconds."""

    batch_size: int = 6
    frame_period: float = 0.06


@dataclass(frozen=True)
class FewShot:
    """The same fixed batch at every step."""

    batch_ids: tuple = (0, 1, 2, 3, 4, 5)

    @property
    def batch_size(self):
        return len(self.batch_ids)

    @classmethod
    def sample(cls, dataset_size, batch_size, seed=0):
        rng = np.random.default_rng(seed)
        return cls(tuple(int(i) for i in np.sort(rng.choice(dataset_size, batch_size, replace=False))))


@dataclass(frozen=True)
class Segment:
    data: object
    schedule: AdaptationSchedule
    protocol: object


def online_clock_check(protocol, steps, frames_consumed=None):
    """Wall-clock time after ``steps`` online steps: ``steps * frame_period * batch_size``.

    When ``frames_consumed`` is given it must equal ``steps * batch_size``.
    """
    if steps < 0:
        raise InvalidInputError("step count must be non-negative")
    if frames_consumed is not None and frames_consumed != steps * protocol.batch_size:
        raise ProtocolViolationError(
            f"{frames_consumed} frames consumed after {steps} steps of {protocol.batch_size}"
        )
    return steps * protocol.frame_period * protocol.batch_size


class _OfflineSampler:
    def __init__(self, data, protocol):
        if protocol.batch_size > len(data):
            raise InvalidInputError("adaptation set is smaller than one batch")
        self.data = data
        self.size = protocol.batch_size
        self.rng = np.random.default_rng(protocol.seed)
        self.perm = np.empty(0, dtype=np.int64)
        self.pos = 0

    def next_ids(self):
        if self.pos + self.size > len(self.perm):
            self.perm = self.rng.permutation(len(self.data))
            self.pos = 0
        ids = self.perm[self.pos : self.pos + self.size]
        self.pos += self.size
        return ids

    def next(self):
        return self.data.images(self.next_ids())


class _OnlineSampler:
    def __init__(self, data, protocol):
        if not getattr(data, "ordered", False):
            raise ProtocolViolationError("online adaptation needs a temporally ordered frame source")
        self.data = data
        self.protocol = protocol
        self.frames = 0
        self.steps = 0

    def next(self):
        b = self.protocol.batch_size
        if self.frames + b > len(self.data):
            raise ProtocolViolationError(
                f"frame stream exhausted after {self.frames} of {len(self.data)} frames"
            )
        x = self.data.images(np.arange(self.frames, self.frames + b))
        self.frames += b
        self.steps += 1
        online_clock_check(self.protocol, self.steps, self.frames)
        return x


class _FewShotSampler:
    def __init__(self, data, protocol):
        if not protocol.batch_ids:
            raise InvalidInputError("few-shot batch is empty")
        if max(protocol.batch_ids) >= len(data) or min(protocol.batch_ids) < 0:
            raise InvalidInputError("few-shot batch ids outside the adaptation set")
        self.batch = data.images(np.asarray(protocol.batch_ids))

    def next(self):
        return self.batch


def _sampler(data, protocol):
    if isinstance(protocol, Offline):
        return _OfflineSampler(data, protocol)
    if isinstance(protocol, Online):
        return _OnlineSampler(data, protocol)
    if isinstance(protocol, FewShot):
        return _FewShotSampler(data, protocol)
    raise InvalidInputError(f"unsupported protocol {protocol!r}")


# -- traces -----------------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    eta: float
    eta_layers: tuple
    metric: float = None


@dataclass
class AdaptationTrace:
    num_layers: int
    records: list = field(default_factory=list)
    initial_metric: float = None

    def __len__(self):
        return len(self.records)

    @property
    def steps(self):
        return [r.step for r in self.records]

    @property
    def etas(self):
        return [r.eta for r in self.records]

    @property
    def metrics(self):
        return [r.metric for r in self.records]

    def header(self):
        return ["step", "eta"] + [f"eta_layer_{l}" for l in range(1, self.num_layers + 1)] + ["metric"]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            for r in self.records:
                metric = "" if r.metric is None else repr(r.metric)
                w.writerow([r.step, repr(r.eta)] + [repr(e) for e in r.eta_layers] + [metric])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        num_layers = len(header) - 3
        trace = cls(num_layers)
        for row in body:
            metric = float(row[-1]) if row[-1] else None
            trace.records.append(
                StepRecord(int(row[0]), float(row[1]), tuple(float(v) for v in row[2:-1]), metric)
            )
        return trace


# -- adaptation -----------------------------------------------------------------


def _require_bn(model):
    if model.num_bn_layers == 0:
        raise InvalidInputError("model has no BN layers to adapt")


def ubna_adapt(model, data, schedule, protocol, eval_hook=None, normalize_with=NORMALIZE_RUNNING):
    """Adapt the BN running statistics of ``model`` in place.

    At step ``k`` a batch is drawn according to ``protocol`` and pushed
    through the model; BN layer ``l`` mixes its running statistics with the
    batch statistics using ``momentum_at(schedule, k, l)``.
    ``eval_hook(model, step)`` may return a metric that is stored in the trace.
    """
    _require_bn(model)
    if len(data) == 0:
        raise InvalidInputError("adaptation set is empty")
    num_layers = model.num_bn_layers
    trace = AdaptationTrace(num_layers)
    if schedule.num_steps == 0:
        return trace
    sampler = _sampler(data, protocol)

    for step in schedule.steps:
        x = sampler.next()
        etas = tuple(momentum_at(schedule, step, l) for l in range(1, num_layers + 1))
        modes = [Adapt(e, normalize_with) for e in etas]
        model.forward(x, bn_mode=lambda l: modes[l - 1])
        metric = eval_hook(model, step) if eval_hook is not None else None
        trace.records.append(StepRecord(step, schedule.batch_momentum(step), etas, metric))
        log.debug("step %d eta %.6f metric %s", step, trace.records[-1].eta, metric)

    # the protocol is left out on purpose: identical batches give identical checkpoints
    model.provenance["adaptation"] = {"schedule": schedule.to_dict()}
    return trace


def sequential_adapt(model, segments, eval_hook=None, normalize_with=NORMALIZE_RUNNING):
    """Run one adaptation per segment; the step counter restarts at every domain switch."""
    if not segments:
        raise InvalidInputError("sequential adaptation needs at least one segment")
    traces = []
    for seg in segments:
        traces.append(
            ubna_adapt(model, seg.data, seg.schedule, seg.protocol, eval_hook, normalize_with)
        )
    return traces


def adabn_recompute(model, data, batch_size=6):
    """Replace every BN layer's statistics with exact moments over the whole set.

    Batches are taken in index order and propagated with batch-statistics
    normalization; the mean and biased variance of each BN layer's inputs
    are pooled over all batches. Source statistics are discarded.
    """
    _require_bn(model)
    n_items = len(data)
    if n_items == 0:
        raise InvalidInputError("adaptation set is empty")
    if batch_size < 1:
        raise InvalidInputError("batch_size must be positive")
    acc = {}

    def observe(layer_index, h):
        n_b = h.shape[0] * h.shape[1] * h.shape[2]
        m_b = batch_mean(h)
        v_b = batch_var(h, m_b)
        if layer_index not in acc:
            acc[layer_index] = [n_b, m_b, v_b]
            return
        n, mean, var = acc[layer_index]
        tot = n + n_b
        delta = m_b - mean
        fa, fb = n / tot, n_b / tot
        acc[layer_index] = [tot, mean + delta * fb, var * fa + v_b * fb + delta * delta * fa * fb]

    for start in range(0, n_items, batch_size):
        x = data.images(np.arange(start, min(start + batch_size, n_items)))
        model.forward(x, bn_mode=BatchStats(), on_bn_input=observe)

    for layer in model.bn_layers:
        _, mean, var = acc[layer.layer_index]
        bn_set_stats(layer, mean, var)
    model.provenance["adaptation"] = {"method": "adabn", "batch_size": batch_size}


def predict_with_batch_stats(model, batch):
    """Class probabilities with every BN layer normalizing by this batch's own statistics."""
    return model.forward(batch, bn_mode=BatchStats())
