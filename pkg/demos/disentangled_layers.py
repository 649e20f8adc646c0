"""Factored tables keep activations disentangled on the way up; gradients on the way down do not.

    python3 demos/disentangled_layers.py
"""

from laddersim import disentangle as dis

inst = dis.random_instance(13)
print("partition of child factors:", inst.partition)
for name, r in dis.check_forward_theorem(inst).items():
    print(f"forward {name:10s} residual {r['residual']:.2e}")

rep = dis.check_separable_update(inst)
print(f"centered update: off-block mass {rep['off_block_mass']:.2e}")
inst.g_alpha = [g + 0.3 for g in inst.g_alpha]
print(f"uncentered update: off-block mass {dis.check_separable_update(inst, strict=False)['off_block_mass']:.3g}")

demo = dis.backward_residual_demo(range(100))
print(f"raw child gradient entangled on {demo['above_threshold']}/{demo['count']} instances")
