"""Sliding-window prediction and probability ensembling.

No test-time augmentation is applied anywhere in this module.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .segnet import ModelParams, NetConfig, forward_logits, load_checkpoint
from .losses import sigmoid
from .volume import LabelMask, Volume

WEIGHT_FLOOR = 1e-3
THRESHOLD = 0.5


def gaussian_importance(patch_size: Sequence[int], sigma_scale: float = 1.0 / 8) -> np.ndarray:
    """Separable Gaussian centred on the patch, peak 1, floored at ``WEIGHT_FLOOR``."""
    w = np.ones((), dtype=np.float64)
    for p in patch_size:
        i = np.arange(p, dtype=np.float64)
        c = (p - 1) / 2.0
        g = np.exp(-((i - c) ** 2) / (2.0 * (p * sigma_scale) ** 2))
        w = np.multiply.outer(w, g)
    w /= w.max()
    return np.maximum(w, WEIGHT_FLOOR)


@dataclass
class SlidingWindowPlan:
    dims: Tuple[int, int, int]
    patch_size: Tuple[int, int, int]
    step: Tuple[int, int, int]
    origins: List[Tuple[int, int, int]]
    importance: np.ndarray = field(repr=False)

    @property
    def padded_dims(self) -> Tuple[int, int, int]:
        return tuple(max(d, p) for d, p in zip(self.dims, self.patch_size))  # type: ignore[return-value]


def _axis_origins(n: int, p: int, step: int) -> List[int]:
    if n <= p:
        return [0]
    count = math.ceil((n - p) / step) + 1
    return sorted({min(i * step, n - p) for i in range(count)})


def plan_windows(dims: Sequence[int], patch_size: Sequence[int], importance: str = "gaussian") -> SlidingWindowPlan:
    """Tile ``dims`` with half-overlapping windows; the last window on each axis is clamped to the end."""
    dims = tuple(int(d) for d in dims)
    patch = tuple(int(p) for p in patch_size)
    if min(dims) < 1 or min(patch) < 1:
        raise ValueError(f"dims and patch size must be positive, got {dims} and {patch}")
    step = tuple(max(1, p // 2) for p in patch)
    per_axis = [_axis_origins(n, p, s) for n, p, s in zip(dims, patch, step)]
    origins = [(x, y, z) for x in per_axis[0] for y in per_axis[1] for z in per_axis[2]]
    if importance == "gaussian":
        weights = gaussian_importance(patch)
    elif importance == "constant":
        weights = np.ones(patch)
    else:
        raise ValueError(f"unknown importance map {importance!r}")
    return SlidingWindowPlan(dims, patch, step, origins, weights)  # type: ignore[arg-type]


def accumulate_windows(plan: SlidingWindowPlan, window_probs) -> Tuple[np.ndarray, np.ndarray]:
    """Weighted sums of per-window probabilities and of the weights, over the padded grid.

    ``window_probs`` yields one patch-shaped array per origin, in plan order.
    """
    acc = np.zeros(plan.padded_dims)
    norm = np.zeros(plan.padded_dims)
    w = plan.importance
    for (x, y, z), probs in zip(plan.origins, window_probs):
        sl = (slice(x, x + plan.patch_size[0]), slice(y, y + plan.patch_size[1]), slice(z, z + plan.patch_size[2]))
        acc[sl] += w * probs
        norm[sl] += w
    return acc, norm


def _window_probs(params: ModelParams, net: NetConfig, padded: np.ndarray, plan: SlidingWindowPlan, batch: int):
    px, py, pz = plan.patch_size
    for start in range(0, len(plan.origins), batch):
        chunk = plan.origins[start : start + batch]
        x = np.stack([padded[a : a + px, b : b + py, c : c + pz] for a, b, c in chunk])
        logits, _ = forward_logits(params, net, x[..., None].astype(params.vector.dtype))
        for p in sigmoid(logits.astype(np.float64)):
            yield p


def predict_volume(
    params: ModelParams,
    net: NetConfig,
    image: Volume,
    plan: SlidingWindowPlan,
    window_batch: int = 4,
) -> Volume:
    """Foreground probability for every voxel, blending overlapping windows by importance weight."""
    if tuple(image.dims) != plan.dims:
        raise ValueError(f"plan was made for dims {plan.dims}, image has {image.dims}")
    padded = np.zeros(plan.padded_dims, dtype=np.float32)
    padded[: image.dims[0], : image.dims[1], : image.dims[2]] = image.data
    acc, norm = accumulate_windows(plan, _window_probs(params, net, padded, plan, window_batch))
    probs = acc / norm
    probs = probs[: image.dims[0], : image.dims[1], : image.dims[2]]
    return Volume(np.clip(probs, 0.0, 1.0), image.spacing)


def threshold(probs: Volume, level: float = THRESHOLD) -> LabelMask:
    """Binary mask with ties going to foreground."""
    return LabelMask(probs.data >= level, probs.spacing)


@dataclass
class EnsembleSpec:
    members: List[str]
    patch_size: Tuple[int, int, int] = (32, 32, 32)
    threshold: float = THRESHOLD

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member")


class MemberLoadError(RuntimeError):
    def __init__(self, member, reason):
        super().__init__(f"cannot load ensemble member {member}: {reason}")
        self.member = member


def load_members(spec: EnsembleSpec) -> List[Tuple[ModelParams, NetConfig]]:
    models = []
    for path in sorted(os.fspath(m) for m in spec.members):
        try:
            models.append(load_checkpoint(path))
        except (OSError, ValueError) as exc:
            raise MemberLoadError(path, exc) from exc
    return models


def ensemble_probabilities(models: Sequence[Tuple[ModelParams, NetConfig]], image: Volume, patch_size) -> Volume:
    """Arithmetic mean of member probability maps, accumulated in the given order."""
    plan = plan_windows(image.dims, patch_size)
    total = np.zeros(image.dims)
    for params, net in models:
        total += predict_volume(params, net, image, plan).data
    return Volume(total / len(models), image.spacing)


def ensemble_predict(spec: EnsembleSpec, image: Volume) -> Tuple[Volume, LabelMask]:
    probs = ensemble_probabilities(load_members(spec), image, spec.patch_size)
    return probs, threshold(probs, spec.threshold)
