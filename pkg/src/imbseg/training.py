"""Fold-wise training of the micro U-Net and best-per-fold model selection."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .inference import plan_windows, predict_volume, threshold
from .losses import LossSpec, compound_loss_logits
from .metrics import dsc
from .segnet import ModelParams, NetConfig, backward_logits, check_patch_dims, forward_logits, init_params
from .volume import LabelMask, Volume

logger = logging.getLogger(__name__)

LOSS_GROUPS = ("dice_ce", "dice_topk")


class Case(NamedTuple):
    case_id: str
    image: Volume
    mask: LabelMask


@dataclass(frozen=True)
class TrainConfig:
    loss: LossSpec = field(default_factory=LossSpec)
    patch_size: Tuple[int, int, int] = (32, 32, 32)
    batch_size: int = 2
    iterations: int = 300
    lr0: float = 0.01
    poly_power: float = 0.9
    momentum: float = 0.99
    nesterov: bool = True
    weight_decay: float = 3e-5
    grad_clip: float = 12.0
    oversample_fraction: float = 1.0 / 3.0
    log_interval: int = 10
    val_interval: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not 0 <= self.oversample_fraction <= 1:
            raise ValueError("oversample_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_size"] = list(self.patch_size)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        if "loss" in d and not isinstance(d["loss"], LossSpec):
            d["loss"] = LossSpec(**d["loss"])
        if "patch_size" in d:
            d["patch_size"] = tuple(d["patch_size"])
        return cls(**d)


def poly_lr(lr0: float, t: int, total: int, power: float = 0.9) -> float:
    return lr0 * (1.0 - t / total) ** power


# ---------------------------------------------------------------- folds


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_case_ids: Tuple[str, ...]
    val_case_ids: Tuple[str, ...]


def make_folds(case_ids: Sequence[str], n_folds: int = 5, seed: int = 0) -> List[FoldSplit]:
    """Seeded shuffle then round-robin assignment to folds."""
    ids = list(case_ids)
    if len(ids) < n_folds:
        raise ValueError(f"need at least {n_folds} cases for {n_folds} folds, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ValueError("case ids must be unique")
    order = np.random.default_rng(seed).permutation(len(ids))
    buckets: List[List[str]] = [[] for _ in range(n_folds)]
    for rank, i in enumerate(order):
        buckets[rank % n_folds].append(ids[i])
    folds = []
    for k in range(n_folds):
        val = set(buckets[k])
        train = tuple(c for c in ids if c not in val)
        folds.append(FoldSplit(k, train, tuple(c for c in ids if c in val)))
    return folds


# ---------------------------------------------------------------- sampling


def _extract(arr: np.ndarray, origin, patch) -> np.ndarray:
    out = np.zeros(patch, dtype=arr.dtype)
    src = tuple(slice(max(o, 0), min(o + p, n)) for o, p, n in zip(origin, patch, arr.shape))
    dst = tuple(slice(s.start - o, s.stop - o) for s, o in zip(src, origin))
    out[dst] = arr[src]
    return out


class PatchSampler:
    """Draws training batches; draws for iteration ``t`` depend only on ``(seed, t)``.

    The last ``round(B * oversample_fraction)`` samples of each batch (at least
    one when the fraction is positive) are centred on a random foreground voxel
    of a case that has foreground.
    """

    def __init__(self, cases: Sequence[Case], tc: TrainConfig):
        if not cases:
            raise ValueError("empty training set")
        self.cases = list(cases)
        self.tc = tc
        self.fg_coords = [np.argwhere(c.mask.data) for c in self.cases]
        self.fg_cases = [i for i, f in enumerate(self.fg_coords) if len(f)]
        n_forced = round(tc.batch_size * tc.oversample_fraction)
        if tc.oversample_fraction > 0:
            n_forced = max(1, n_forced)
        self.n_forced = min(n_forced, tc.batch_size)

    def forced(self, j: int) -> bool:
        return j >= self.tc.batch_size - self.n_forced

    def batch(self, t: int) -> Tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng([self.tc.seed, 0xBA7C, t])
        patch = self.tc.patch_size
        xs, ys = [], []
        for j in range(self.tc.batch_size):
            if self.forced(j) and self.fg_cases:
                ci = self.fg_cases[rng.integers(len(self.fg_cases))]
                fg = self.fg_coords[ci]
                centre = fg[rng.integers(len(fg))]
                origin = [int(c) - p // 2 for c, p in zip(centre, patch)]
            else:
                ci = int(rng.integers(len(self.cases)))
                origin = None
            case = self.cases[ci]
            dims = case.image.dims
            if origin is None:
                origin = [int(rng.integers(0, max(n - p, 0) + 1)) for n, p in zip(dims, patch)]
            else:
                origin = [min(max(o, 0), max(n - p, 0)) for o, n, p in zip(origin, dims, patch)]
            xs.append(_extract(case.image.data, origin, patch))
            ys.append(_extract(case.mask.data, origin, patch))
        return np.stack(xs).astype(np.float32), np.stack(ys).astype(np.float64)


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    final_params: ModelParams
    best_params: ModelParams
    best_val_dsc: Optional[float]
    log: List[dict]


def loss_and_grad(params: ModelParams, net: NetConfig, spec: LossSpec, x: np.ndarray, y: np.ndarray):
    """Scalar loss and parameter gradient for a batch ``x`` (B,X,Y,Z) with targets ``y``."""
    logits, cache = forward_logits(params, net, x[..., None])
    lv = compound_loss_logits(spec, logits, y)
    return lv.value, backward_logits(params, net, cache, lv.grad)


class NesterovSGD:
    """Momentum SGD in the ``v = mu v + g; step = g + mu v`` form."""

    def __init__(self, n: int, momentum: float, nesterov: bool = True, dtype=np.float32):
        self.v = np.zeros(n, dtype=dtype)
        self.mu = momentum
        self.nesterov = nesterov

    def step(self, theta: np.ndarray, grad: np.ndarray, lr: float) -> None:
        self.v *= self.mu
        self.v += grad
        update = grad + self.mu * self.v if self.nesterov else self.v
        theta -= (lr * update).astype(theta.dtype)


def train_fold(
    dataset: Mapping[str, Case],
    fold: FoldSplit,
    net: NetConfig,
    tc: TrainConfig,
    init_seed: Optional[int] = None,
) -> TrainResult:
    """Train one model on the fold's training cases.

    Validation DSC on the fold's validation cases is computed every
    ``val_interval`` iterations (if positive) and after the last iteration;
    the parameters with the best validation DSC are returned alongside the
    final ones.
    """
    train_cases = [dataset[c] for c in fold.train_case_ids]
    if not train_cases:
        raise ValueError("empty training set")
    check_patch_dims(tc.patch_size, net)
    params = init_params(net, tc.seed if init_seed is None else init_seed)
    sampler = PatchSampler(train_cases, tc)
    opt = NesterovSGD(params.vector.size, tc.momentum, tc.nesterov, params.vector.dtype)
    log: List[dict] = []
    best, best_dsc = params.copy(), None

    def run_validation():
        nonlocal best, best_dsc
        if not fold.val_case_ids:
            return None
        score = validate_fold(params, net, fold, dataset, tc.patch_size)
        if best_dsc is None or score > best_dsc:
            best, best_dsc = params.copy(), score
        return score

    T = tc.iterations
    for t in range(T):
        lr = poly_lr(tc.lr0, t, T, tc.poly_power)
        x, y = sampler.batch(t)
        value, grad = loss_and_grad(params, net, tc.loss, x, y)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"non-finite loss or gradient at iteration {t}")
        if tc.weight_decay:
            grad = grad + tc.weight_decay * params.vector
        if tc.grad_clip:
            norm = float(np.linalg.norm(grad))
            if norm > tc.grad_clip:
                grad = grad * (tc.grad_clip / norm)
        opt.step(params.vector, grad.astype(params.vector.dtype), lr)
        last = t == T - 1
        val = None
        if last or (tc.val_interval and (t + 1) % tc.val_interval == 0):
            val = run_validation()
        if last or val is not None or t % tc.log_interval == 0:
            log.append({"iteration": t, "loss": value, "lr": lr, "val_dsc": val})
            logger.debug("iter %d loss %.5f lr %.5f val %s", t, value, lr, val)
    return TrainResult(params, best, best_dsc, log)


def write_log_csv(log: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss", "lr", "val_dsc"])
        for row in log:
            val = "" if row["val_dsc"] is None else repr(row["val_dsc"])
            w.writerow([row["iteration"], repr(row["loss"]), repr(row["lr"]), val])


def predict_mask(params: ModelParams, net: NetConfig, image: Volume, patch_size) -> LabelMask:
    plan = plan_windows(image.dims, patch_size)
    return threshold(predict_volume(params, net, image, plan))


def validate_fold(
    params: ModelParams,
    net: NetConfig,
    fold: FoldSplit,
    dataset: Mapping[str, Case],
    patch_size=(32, 32, 32),
) -> float:
    """Mean DSC over the fold's validation cases."""
    scores = []
    for cid in fold.val_case_ids:
        case = dataset[cid]
        scores.append(dsc(predict_mask(params, net, case.image, patch_size), case.mask))
    if not scores:
        raise ValueError(f"fold {fold.fold_index} has no validation cases")
    return float(np.mean(scores))


# ---------------------------------------------------------------- selection


def select_best_per_fold(
    results: Mapping[Tuple[int, str], float],
    groups: Sequence[str] = LOSS_GROUPS,
    n_folds: int = 5,
) -> List[Tuple[int, str]]:
    """For each fold, the loss group with the highest validation DSC.

    Ties go to the group listed first in ``groups``.
    """
    present = [g for g in groups if any((f, g) in results for f in range(n_folds))]
    if not present:
        raise ValueError("results table is empty")
    out = []
    for f in range(n_folds):
        missing = [g for g in present if (f, g) not in results]
        if missing:
            raise ValueError(f"incomplete results table: fold {f} lacks {missing}")
        best = present[0]
        for g in present[1:]:
            if results[(f, g)] > results[(f, best)]:
                best = g
        out.append((f, best))
    return out
