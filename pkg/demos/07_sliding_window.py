"""Sliding-window inference with Gaussian weighting and a probability-averaging ensemble."""
import numpy as np

from imbseg.inference import ensemble_probabilities, gaussian_importance, plan_windows, threshold
from imbseg.segnet import NetConfig, init_params
from imbseg.synthgen import SynthSpec, generate_case

image, _, _ = generate_case(SynthSpec(seed=2, dims=(40, 40, 40)))
plan = plan_windows(image.dims, (16, 16, 16))
print("windows:", len(plan.origins), "first origins:", plan.origins[:3])
w = gaussian_importance((16, 16, 16))
print(f"importance centre/corner ratio {w.max() / w.min():.0f}")
cfg = NetConfig(base_channels=2, levels=2)
models = [(init_params(cfg, s), cfg) for s in range(3)]
probs = ensemble_probabilities(models, image, (16, 16, 16))
print(f"ensemble probability range [{probs.data.min():.3f}, {probs.data.max():.3f}], foreground voxels {int(threshold(probs).data.sum())}")
