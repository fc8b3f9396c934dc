"""Run the small U-Net forward and check its backward pass by finite differences."""
import numpy as np

from imbseg.losses import LossSpec, compound_loss
from imbseg.segnet import NetConfig, backward, forward, forward_logits, init_params, layer_table

cfg = NetConfig(base_channels=2, levels=2)
P = init_params(cfg, 0, np.float64)
print("parameters:", P.vector.size, "layers:", len(layer_table(cfg)))
rng = np.random.default_rng(0)
x = rng.standard_normal((8, 8, 8))
g = (rng.random((8, 8, 8)) < 0.1).astype(float)
spec = LossSpec("dice_ce")
lv = compound_loss(spec, forward(P, cfg, x).probs, g)
grad = backward(P, cfg, x, lv.grad)

# hold each leaky-ReLU unit on the branch it takes at P so the differences see a smooth function
_, cache = forward_logits(P, cfg, x[None, ..., None])
pattern = {k: v for k, v in cache.items() if k.endswith(".pos")}


def loss_at(vec):
    Q = P.copy()
    Q.vector[:] = vec
    logits, _ = forward_logits(Q, cfg, x[None, ..., None], pattern)
    return compound_loss(spec, 1 / (1 + np.exp(-logits[0])), g).value


h, worst = 1e-3, 0.0
for j in rng.choice(P.vector.size, 40, replace=False):
    e = np.zeros_like(P.vector)
    e[j] = h
    fd = (loss_at(P.vector + e) - loss_at(P.vector - e)) / (2 * h)
    worst = max(worst, abs(fd - grad[j]) / max(abs(fd), abs(grad[j]), 1e-12))
print(f"max relative error over 40 random parameters: {worst:.2e}")
