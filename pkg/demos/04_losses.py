"""Compare the losses on one imbalanced prediction and check a gradient by differences."""
import numpy as np

from imbseg.losses import LossSpec, compound_loss

rng = np.random.default_rng(1)
g = np.zeros((8, 8, 8))
g[3:5, 3:5, 3:5] = 1
p = np.clip(0.1 + 0.6 * g + 0.05 * rng.standard_normal(g.shape), 0.01, 0.99)
for kind in ("dice", "ce", "topk", "dice_ce", "dice_topk"):
    print(f"{kind:10s} {compound_loss(LossSpec(kind), p, g).value:.4f}")

spec, h, i = LossSpec("dice_ce"), 1e-5, (3, 3, 3)
a, b = p.copy(), p.copy()
a[i] += h
b[i] -= h
fd = (compound_loss(spec, a, g).value - compound_loss(spec, b, g).value) / (2 * h)
print("analytic", compound_loss(spec, p, g).grad[i], "central difference", fd)
