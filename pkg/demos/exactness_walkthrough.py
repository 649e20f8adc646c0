"""Train a small student on an injective teacher and watch event-space dynamics track the brute-force network.

    python3 demos/exactness_walkthrough.py
"""

import numpy as np

from laddersim import dynamics as dyn
from laddersim import oracle as orc
from laddersim import teacher as tch

g = tch.random_injective_teacher(2)
tabs = tch.all_tables(g)
print("regions:", {r: (reg.m, reg.n) for r, reg in g.regions.items()})
print("leaf order:", g.leaf_order)

w = dyn.init_weights(tabs, dyn.node_counts(g), seed=0, bias=True)
im = orc.delta_inputs(g)


def hook(step, weights, updates, state):
    if step % 5:
        return
    rep = orc.compare_exactness(g, weights, im, tables=tabs)
    print(f"step {step:3d}  loss {dyn.loss(state):.6f}  max |dynamics - oracle| {rep.max_divergence:.2e}")


run = dyn.train(tabs, w, dyn.TrainConfig(lr=0.05, steps=30), callback=hook)

# lossy inputs break the point-mass condition; the gap is reported, not bounded
rep = orc.compare_exactness(g, run.weights, orc.lossy_inputs(g, 2, seed=1), tables=tabs)
print(f"lossy inputs: divergence {rep.max_divergence:.3g}, decorrelation {rep.max_decorrelation:.3g}")
F = dyn.forward_pass(tabs, run.weights).F[g.root.id]
print(f"top activation after training: mean diagonal {np.diag(F).mean():.3f}, "
      f"mean |off-diagonal| {np.abs(F[~np.eye(len(F), dtype=bool)]).mean():.3f}")
