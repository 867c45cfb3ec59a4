"""
Momentum schedules
==================

How the three presets weight new target batches. A constant momentum keeps
pulling the statistics forever; a decaying one freezes them after a few
dozen steps and keeps part of the source statistics.
"""
import math

from ubna import momentum_at, schedule_for

presets = {name: schedule_for(name) for name in ("ubna0", "ubna", "ubna+")}

print("momentum of BN layer 1 per step")
print("step " + "".join(f"{n:>10}" for n in presets))
for k in (1, 5, 10, 20, 30, 50):
    print(f"{k:4d} " + "".join(f"{momentum_at(s, k, 1):10.5f}" for s in presets.values()))

# fraction of the source statistics left after all 50 steps on a fixed batch
print("\nweight left on the source statistics after 50 steps")
for name, s in presets.items():
    w = 1.0
    for k in s.steps:
        w *= 1.0 - momentum_at(s, k, 1)
    print(f"  {name:6s} {w:.4f}")

# layer-wise weighting: deeper layers move more slowly
plus = presets["ubna+"]
print("\nubna+ at step 1, by layer:")
for layer in (1, 2, 3, 10):
    print(f"  layer {layer:2d}: {momentum_at(plus, 1, layer):.5f}")
print("ratio layer 11 / layer 1:", momentum_at(plus, 1, 11) / momentum_at(plus, 1, 1),
      "=", math.exp(-0.3))
