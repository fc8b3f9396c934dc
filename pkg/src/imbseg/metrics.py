"""Leaderboard metrics: Dice, 95th-percentile Hausdorff distance, volumetric similarity."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .postprocess import label_components
from .volume import LabelMask, check_geometry

UNDEFINED_EMPTY = "undefined-empty"


def dsc(pred: LabelMask, ref: LabelMask) -> float:
    check_geometry(pred, ref)
    p, r = pred.as_bool(), ref.as_bool()
    total = int(p.sum()) + int(r.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, r).sum()) / total


def volumetric_similarity(pred: LabelMask, ref: LabelMask) -> float:
    check_geometry(pred, ref)
    a, b = pred.count, ref.count
    if a + b == 0:
        return 1.0
    return 1.0 - abs(a - b) / (a + b)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Indices (n, 3) of foreground voxels with a background 6-neighbour; outside the grid is background."""
    m = np.pad(mask.astype(bool), 1)
    core = m[1:-1, 1:-1, 1:-1]
    interior = core.copy()
    for axis in range(3):
        for shift in (0, 2):
            sl = [slice(1, -1)] * 3
            sl[axis] = slice(shift, shift + core.shape[axis])
            interior &= m[tuple(sl)]
    return np.argwhere(core & ~interior)


def point_distance(a: np.ndarray, b: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    """Euclidean mm distance between paired voxel index rows."""
    d = (a - b).astype(np.float64) * np.asarray(spacing, dtype=np.float64)
    return np.sqrt(np.sum(d * d, axis=-1))


def nearest_rank(values: np.ndarray, q: float = 95.0) -> float:
    v = np.sort(values)
    rank = max(1, math.ceil(q / 100.0 * v.size))
    return float(v[rank - 1])


def directed_surface_distances(src: np.ndarray, dst: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    sp = np.asarray(spacing, dtype=np.float64)
    tree = cKDTree(dst * sp)
    _, idx = tree.query(src * sp)
    # recompute with the canonical formula so values do not depend on the tree internals
    return point_distance(src, dst[idx], spacing)


def hd95(pred: LabelMask, ref: LabelMask) -> Optional[float]:
    """Symmetric 95th-percentile surface distance in mm.

    Returns ``None`` when exactly one mask is empty, 0.0 when both are.
    """
    check_geometry(pred, ref)
    pc, rc = pred.count, ref.count
    if pc == 0 and rc == 0:
        return 0.0
    if pc == 0 or rc == 0:
        return None
    sp, sr = surface_voxels(pred.data), surface_voxels(ref.data)
    d_pr = directed_surface_distances(sp, sr, pred.spacing)
    d_rp = directed_surface_distances(sr, sp, pred.spacing)
    return max(nearest_rank(d_pr), nearest_rank(d_rp))


@dataclass
class CaseMetrics:
    case_id: str
    dsc: float
    hd95: Optional[float]
    volumetric_similarity: float
    pred_components: int
    ref_components: int
    flags: List[str] = field(default_factory=list)

    def row(self) -> list:
        hd = UNDEFINED_EMPTY if self.hd95 is None else repr(self.hd95)
        return [self.case_id, repr(self.dsc), hd, repr(self.volumetric_similarity),
                self.pred_components, self.ref_components, "|".join(self.flags)]


def evaluate_case(pred: LabelMask, ref: LabelMask, case_id: str = "", connectivity: int = 26) -> CaseMetrics:
    flags = []
    if pred.count == 0:
        flags.append("empty_pred")
    if ref.count == 0:
        flags.append("empty_ref")
    return CaseMetrics(
        case_id=case_id,
        dsc=dsc(pred, ref),
        hd95=hd95(pred, ref),
        volumetric_similarity=volumetric_similarity(pred, ref),
        pred_components=label_components(pred, connectivity).count,
        ref_components=label_components(ref, connectivity).count,
        flags=flags,
    )


def aggregate(cases: Sequence[CaseMetrics]) -> dict:
    """Means over cases; HD95 averaged over cases where it is defined."""
    if not cases:
        raise ValueError("cannot aggregate an empty list of cases")
    defined = [c.hd95 for c in cases if c.hd95 is not None]
    return {
        "n_cases": len(cases),
        "mean_dsc": float(np.mean([c.dsc for c in cases])),
        "mean_hd95": float(np.mean(defined)) if defined else None,
        "hd95_undefined_count": len(cases) - len(defined),
        "mean_volumetric_similarity": float(np.mean([c.volumetric_similarity for c in cases])),
    }


CSV_COLUMNS = ["case_id", "dsc", "hd95", "vs", "pred_components", "ref_components", "flags"]


def write_metrics_csv(cases: Iterable[CaseMetrics], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for c in cases:
            w.writerow(c.row())


def read_metrics_csv(path) -> List[CaseMetrics]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(CaseMetrics(
                case_id=row["case_id"],
                dsc=float(row["dsc"]),
                hd95=None if row["hd95"] == UNDEFINED_EMPTY else float(row["hd95"]),
                volumetric_similarity=float(row["vs"]),
                pred_components=int(row["pred_components"]),
                ref_components=int(row["ref_components"]),
                flags=[f for f in row["flags"].split("|") if f],
            ))
    return out


def write_summary_json(summary: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
