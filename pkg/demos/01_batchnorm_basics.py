"""
Batch norm modes and running statistics
=======================================

A single BN layer in the three modes that matter here: training (batch
statistics, EMA update), evaluation (running statistics, no update) and
adaptation (EMA update with a caller-chosen momentum, no gradients).
"""
import numpy as np

from ubna import Adapt, BNLayerState, Eval, Train, bn_forward
from ubna.nncore import batch_mean, batch_var

rng = np.random.default_rng(0)

# features of shape (B, H, W, C), channels last
x = rng.normal(loc=2.0, scale=3.0, size=(4, 5, 5, 2)).astype(np.float32)
print("batch mean", batch_mean(x))
print("batch var ", batch_var(x, batch_mean(x)))

bn = BNLayerState.fresh(channels=2)
print("\nfresh running stats:", bn.running_mean, bn.running_var)

# one training step nudges the running stats 10% of the way to the batch stats
out = bn_forward(x, bn, Train(0.1))
print("after one Train step:", bn.running_mean, bn.running_var)
print("train output is standardized:", out.mean(axis=(0, 1, 2)), out.std(axis=(0, 1, 2)))

# evaluation never touches the state
before = bn.running_mean.copy()
bn_forward(x, bn, Eval())
assert np.array_equal(before, bn.running_mean)

# adaptation with momentum 1 copies the batch statistics outright
bn_forward(x, bn, Adapt(1.0))
print("\nafter Adapt(1.0):", bn.running_mean, bn.running_var)

# repeated adaptation with a small momentum converges geometrically
bn = BNLayerState.fresh(channels=2)
start = np.abs(bn.running_mean - batch_mean(x))
for k in range(1, 51):
    bn_forward(x, bn, Adapt(0.1))
    if k in (1, 10, 50):
        gap = np.abs(bn.running_mean - batch_mean(x))
        print(f"step {k:2d}: |running - batch| = {gap.max():.6f}, 0.9^k * initial gap = {(0.9**k * start).max():.6f}")
