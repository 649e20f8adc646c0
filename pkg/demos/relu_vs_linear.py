"""Exact zero loss from hyperplane weights on an all-vertex ladder, next to the rank floor of a linear bottleneck.

    python3 demos/relu_vs_linear.py
"""

import numpy as np

from laddersim import dynamics as dyn
from laddersim import hull
from laddersim import scenarios as sc
from laddersim import teacher as tch

cfg = sc.bundled_config("expressibility")
g = sc.make_teacher(cfg["ladder"])
tabs = tch.all_tables(g)
for (a, b), t in sorted(tabs.items()):
    print(f"P[{a},{b}] all rows vertices: {hull.vertex_set(t.P, certificates=False).all_vert}")

st = dyn.forward_pass(tabs, hull.construct_ladder_identity_weights(tabs))
np.set_printoptions(precision=3, suppress=True)
print("raw top activation (unit diagonal, negative elsewhere):\n", st.Fraw[g.root.id])
print("ReLU loss with constructed weights:", dyn.loss(st))

gb = sc.make_teacher(cfg["bottleneck"])
tb = tch.all_tables(gb)
nb = dyn.node_counts(gb)
r, floor = hull.linear_lower_bound(tb, nb)
lin = dyn.train(tb, dyn.init_weights(tb, nb, seed=0), dyn.TrainConfig(lr=0.5, steps=2000, gating_mode="linear"))
print(f"bottleneck rank {r}: linear floor {floor}, trained linear loss {lin.losses[-1]:.6f}")
relu = min(dyn.train(tb, dyn.init_weights(tb, nb, seed=s, bias=True, bias_init=0.3),
                     dyn.TrainConfig(lr=0.5, steps=3000)).losses[-1] for s in range(4))
print(f"best ReLU loss over 4 restarts: {relu:.6f}")
