"""Connected components and small-component removal."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import ndimage

from .volume import LabelMask

_RANK = {6: 1, 18: 2, 26: 3}


@dataclass
class ComponentLabeling:
    labels: np.ndarray
    sizes: np.ndarray
    connectivity: int

    @property
    def count(self) -> int:
        return int(self.sizes.size)


def structure(connectivity: int) -> np.ndarray:
    if connectivity not in _RANK:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    return ndimage.generate_binary_structure(3, _RANK[connectivity])


def label_components(mask: LabelMask, connectivity: int = 26) -> ComponentLabeling:
    """Label foreground components.

    Ids are 1..C in the order each component is first met when scanning
    voxels x-fastest.
    """
    raw, n = ndimage.label(mask.data, structure=structure(connectivity))
    if n == 0:
        return ComponentLabeling(np.zeros(mask.dims, np.int32), np.zeros(0, np.int64), connectivity)
    flat = raw.ravel(order="F")
    ids, first = np.unique(flat, return_index=True)
    keep = ids > 0
    ids, first = ids[keep], first[keep]
    remap = np.zeros(n + 1, np.int32)
    remap[ids[np.argsort(first, kind="stable")]] = np.arange(1, n + 1, dtype=np.int32)
    labels = remap[raw]
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:].astype(np.int64)
    return ComponentLabeling(labels, sizes, connectivity)


def remove_small_components(mask: LabelMask, min_size: int = 11, connectivity: int = 26) -> Tuple[LabelMask, int]:
    """Zero every component with fewer than ``min_size`` voxels.

    Returns the cleaned mask and the number of components removed.
    """
    lab = label_components(mask, connectivity)
    if lab.count == 0:
        return LabelMask(mask.data.copy(), mask.spacing), 0
    keep = np.concatenate([[False], lab.sizes >= min_size])
    out = keep[lab.labels].astype(np.uint8)
    return LabelMask(out, mask.spacing), int((~keep[1:]).sum())
