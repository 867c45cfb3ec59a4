"""Central finite-difference checks of the hand-written backward pass.

Weights stay float32 and are nudged by +-1e-3; the loss itself is computed
in float64. The O(h^2) error bound of a central difference only holds where
the loss is smooth, so an instance is used only if no ReLU input changes
sign for any single-parameter nudge of up to ten steps; otherwise the next
seed is tried.
"""
import numpy as np

from ubna.batchnorm import BatchStats, BNLayerState, bn_forward
from ubna.model import Architecture, Model, ReLU
from ubna.nncore import LinearLayer
from ubna.pretrain import backward_pass

STEP = 1e-3
SMOOTH_RADIUS = 10 * STEP
# below this magnitude the O(h^2) truncation error dominates a relative comparison
GRAD_FLOOR = 1e-4
ARCH = Architecture(hidden=(4, 3), num_classes=3)


def relu_pattern(model, x):
    h = x.astype(np.float64)
    signs = []
    for layer in model.layers:
        if isinstance(layer, BNLayerState):
            h = bn_forward(h, layer, BatchStats())
        elif isinstance(layer, LinearLayer):
            h = h @ layer.weight.T.astype(np.float64) + layer.bias
        elif isinstance(layer, ReLU):
            signs.append((h > 0).ravel())
            h = np.maximum(h, 0)
    return np.concatenate(signs)


def random_instance(seed, shape=(4, 3, 3)):
    rng = np.random.default_rng(seed)
    model = Model.build(ARCH, seed=int(rng.integers(2**31)))
    for bn in model.bn_layers:
        bn.gamma = rng.uniform(0.5, 1.5, bn.channels).astype(np.float32)
        bn.beta = rng.normal(0, 0.3, bn.channels).astype(np.float32)
    x = rng.random(shape + (ARCH.in_channels,)).astype(np.float32)
    y = rng.integers(0, ARCH.num_classes, size=shape)
    weights = rng.uniform(0.5, 2.0, ARCH.num_classes)
    return model, x, y, weights


def check_instance(model, x, y, weights):
    """Worst relative error per parameter name, or ``None`` if the instance sits near a ReLU kink."""
    _, grads = backward_pass(model, x, y, weights=weights)
    base = relu_pattern(model, x)
    worst = {}
    for pos, name, value in list(model.parameters()):
        flat = value.reshape(-1)
        g = grads[pos, name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            for v in (orig + SMOOTH_RADIUS, orig - SMOOTH_RADIUS):
                flat[i] = np.float32(v)
                changed = not np.array_equal(relu_pattern(model, x), base)
                flat[i] = orig
                if changed:
                    return None
            up, down = np.float32(orig + STEP), np.float32(orig - STEP)
            losses = []
            for v in (up, down):
                flat[i] = v
                losses.append(backward_pass(model, x, y, weights=weights)[0])
                if not np.array_equal(relu_pattern(model, x), base):
                    flat[i] = orig
                    return None
            flat[i] = orig
            fd = (losses[0] - losses[1]) / (float(up) - float(down))
            err = abs(g[i] - fd) / max(abs(g[i]), abs(fd), GRAD_FLOOR)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst


def checked_instances(count, first_seed=0):
    """Yield ``(seed, worst_errors)`` for the first ``count`` kink-free instances."""
    seed = first_seed
    found = 0
    while found < count:
        worst = check_instance(*random_instance(seed))
        if worst is not None:
            found += 1
            yield seed, worst
        seed += 1
