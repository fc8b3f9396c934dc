"""Anti-imbalance segmentation losses on foreground probabilities.

All losses take a probability grid ``p`` and a binary target ``g`` of the
same shape (any shape; a batch of patches is treated as one joint region, so
Dice is batch-Dice) and return a :class:`LossValue` holding the scalar loss
and ``dL/dp``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

import numpy as np

CLAMP_DELTA = 1e-7
KINDS = ("dice", "ce", "topk", "dice_ce", "dice_topk")


class LossValue(NamedTuple):
    value: float
    grad: np.ndarray


@dataclass
class Prediction:
    probs: np.ndarray
    logits: Optional[np.ndarray] = None

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "Prediction":
        return cls(sigmoid(logits), logits)


@dataclass(frozen=True)
class LossSpec:
    kind: str = "dice_ce"
    topk_fraction: float = 0.10
    dice_epsilon: float = 1e-5
    w_dice: float = 1.0
    w_other: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")
        if not 0 < self.topk_fraction <= 1:
            raise ValueError(f"topk_fraction must lie in (0, 1], got {self.topk_fraction}")
        if not self.dice_epsilon > 0:
            raise ValueError("dice_epsilon must be positive")
        if self.w_dice < 0 or self.w_other < 0 or (self.w_dice == 0 and self.w_other == 0):
            raise ValueError("compound weights must be nonnegative and not both zero")

    def to_dict(self) -> dict:
        return asdict(self)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _check(p, g):
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: prediction {p.shape} vs target {g.shape}")
    return p, g


def dice_loss(p, g, eps: float = 1e-5) -> LossValue:
    """Soft Dice ``1 - (2 sum(pg) + eps) / (sum(p) + sum(g) + eps)``."""
    p, g = _check(p, g)
    inter = float(np.sum(p * g))
    denom = float(p.sum() + g.sum()) + eps
    num = 2.0 * inter + eps
    grad = -(2.0 * g * denom - num) / denom**2
    return LossValue(1.0 - num / denom, grad)


def _voxel_ce(p, g):
    pc = np.clip(p, CLAMP_DELTA, 1.0 - CLAMP_DELTA)
    ell = -(g * np.log(pc) + (1.0 - g) * np.log1p(-pc))
    dell = -(g / pc) + (1.0 - g) / (1.0 - pc)
    dell[(p < CLAMP_DELTA) | (p > 1.0 - CLAMP_DELTA)] = 0.0
    return ell, dell


def ce_loss(p, g) -> LossValue:
    """Mean binary cross-entropy with probabilities clamped to ``[delta, 1 - delta]``."""
    p, g = _check(p, g)
    ell, dell = _voxel_ce(p, g)
    n = ell.size
    return LossValue(float(ell.sum() / n), dell / n)


def topk_loss(p, g, k: float = 0.10) -> LossValue:
    """Mean cross-entropy of the ``ceil(k N)`` hardest voxels.

    Voxels tied with the cut value are all selected and the mean is taken over
    the enlarged selection.
    """
    if not 0 < k <= 1:
        raise ValueError(f"k must lie in (0, 1], got {k}")
    p, g = _check(p, g)
    ell, dell = _voxel_ce(p, g)
    selected = _topk_selection(ell, k)
    count = int(selected.sum())
    grad = np.where(selected, dell, 0.0) / count
    return LossValue(float(ell[selected].sum() / count), grad)


def _topk_selection(ell: np.ndarray, k: float) -> np.ndarray:
    """Boolean grid of the ceil(k N) largest values, widened to every voxel tied at the cut."""
    flat = ell.ravel()
    n = flat.size
    m = min(n, max(1, math.ceil(k * n)))
    if m == n:
        return np.ones(ell.shape, bool)
    cut = np.partition(flat, n - m)[n - m]
    return ell >= cut


def compound_loss(spec: LossSpec, p, g) -> LossValue:
    if spec.kind == "dice":
        return dice_loss(p, g, spec.dice_epsilon)
    if spec.kind == "ce":
        return ce_loss(p, g)
    if spec.kind == "topk":
        return topk_loss(p, g, spec.topk_fraction)
    dice = dice_loss(p, g, spec.dice_epsilon)
    other = ce_loss(p, g) if spec.kind == "dice_ce" else topk_loss(p, g, spec.topk_fraction)
    return LossValue(
        spec.w_dice * dice.value + spec.w_other * other.value,
        spec.w_dice * dice.grad + spec.w_other * other.grad,
    )


def compound_loss_logits(spec: LossSpec, logits, g) -> LossValue:
    """Same loss value as :func:`compound_loss` on ``sigmoid(logits)``, gradient w.r.t. the logits.

    The cross-entropy part uses the unclamped logit-space gradient ``p - g``.
    It agrees with the chain-ruled probability gradient wherever the clamp is
    inactive and, unlike it, does not vanish on saturated voxels, so a network
    that has collapsed to confident background can still recover.
    """
    z = np.asarray(logits, dtype=np.float64)
    p = sigmoid(z)
    p, g = _check(p, g)
    value = 0.0
    grad = np.zeros_like(p)
    kind = spec.kind
    if kind in ("dice", "dice_ce", "dice_topk"):
        d = dice_loss(p, g, spec.dice_epsilon)
        w = 1.0 if kind == "dice" else spec.w_dice
        value += w * d.value
        grad += w * d.grad * p * (1.0 - p)
    if kind in ("ce", "topk", "dice_ce", "dice_topk"):
        w = 1.0 if kind in ("ce", "topk") else spec.w_other
        if kind in ("ce", "dice_ce"):
            other = ce_loss(p, g)
            selected_grad = (p - g) / p.size
        else:
            other = topk_loss(p, g, spec.topk_fraction)
            sel = _topk_selection(_voxel_ce(p, g)[0], spec.topk_fraction)
            selected_grad = np.where(sel, p - g, 0.0) / int(sel.sum())
        value += w * other.value
        grad += w * selected_grad
    return LossValue(value, grad)
