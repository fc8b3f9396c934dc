"""Geometric data model shared by every stage of the pipeline.

Array layout
------------
Grids are numpy arrays indexed ``[x, y, z]`` with shape ``(nx, ny, nz)``.
The canonical flat order is x-fastest, i.e. ``data.ravel(order="F")``, which
is also the on-disk order of NIfTI voxel data. Every module that flattens or
scans a grid (file I/O, component id assignment) uses this order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np

Triple = Tuple[int, int, int]
Spacing = Tuple[float, float, float]


def _as_spacing(spacing: Sequence[float]) -> Spacing:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3:
        raise ValueError(f"spacing must have 3 components, got {len(sp)}")
    if not all(np.isfinite(s) and s > 0 for s in sp):
        raise ValueError(f"spacing must be positive and finite, got {sp}")
    return sp  # type: ignore[return-value]


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Volume:
    """Dense scalar 3D grid with physical voxel spacing in mm."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64 if self.data.dtype.kind != "f" else self.data.dtype)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume must be a non-empty 3D grid, got shape {arr.shape}")
        if np.isnan(arr).any():
            raise ValueError("volume contains NaN")
        object.__setattr__(self, "data", _frozen(arr))
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def dims(self) -> Triple:
        return tuple(int(n) for n in self.data.shape)  # type: ignore[return-value]

    @property
    def flat(self) -> np.ndarray:
        """Voxel values in x-fastest order."""
        return self.data.ravel(order="F")

    @classmethod
    def from_flat(cls, flat, dims: Sequence[int], spacing=(1.0, 1.0, 1.0)) -> "Volume":
        flat = np.asarray(flat)
        if flat.size != int(np.prod(dims)):
            raise ValueError(f"data length {flat.size} does not match dims {tuple(dims)}")
        return cls(flat.reshape(tuple(dims), order="F"), spacing)

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing)


@dataclass(frozen=True, eq=False)
class LabelMask:
    """Binary 3D grid, background 0 and foreground 1."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.ndim != 3 or min(raw.shape) < 1:
            raise ValueError(f"mask must be a non-empty 3D grid, got shape {raw.shape}")
        if raw.dtype == bool:
            arr = raw.astype(np.uint8)
        else:
            if not np.isin(raw, (0, 1)).all():
                raise ValueError("mask values must be exactly 0 or 1")
            arr = raw.astype(np.uint8)
        object.__setattr__(self, "data", _frozen(arr))
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def dims(self) -> Triple:
        return tuple(int(n) for n in self.data.shape)  # type: ignore[return-value]

    @property
    def flat(self) -> np.ndarray:
        return self.data.ravel(order="F")

    @property
    def count(self) -> int:
        return int(self.data.sum(dtype=np.int64))

    def as_bool(self) -> np.ndarray:
        return self.data.astype(bool)

    @classmethod
    def zeros_like(cls, grid) -> "LabelMask":
        return cls(np.zeros(grid.dims, np.uint8), grid.spacing)


class BoundingBox(NamedTuple):
    """Axis-aligned box with inclusive ``lo`` and ``hi`` voxel corners."""

    lo: Triple
    hi: Triple

    @property
    def shape(self) -> Triple:
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))  # type: ignore[return-value]

    @property
    def slices(self) -> Tuple[slice, slice, slice]:
        return tuple(slice(l, h + 1) for l, h in zip(self.lo, self.hi))  # type: ignore[return-value]

    @classmethod
    def full(cls, dims: Sequence[int]) -> "BoundingBox":
        return cls((0, 0, 0), tuple(int(n) - 1 for n in dims))  # type: ignore[arg-type]

    def validate(self, dims: Sequence[int]) -> None:
        for l, h, n in zip(self.lo, self.hi, dims):
            if not (0 <= l <= h < n):
                raise ValueError(f"bounding box {self.lo}..{self.hi} out of range for dims {tuple(dims)}")


def check_geometry(a, b) -> None:
    """Raise if two grids disagree in dims or spacing."""
    if a.dims != b.dims:
        raise ValueError(f"geometry mismatch: dims {a.dims} vs {b.dims}")
    if not np.allclose(a.spacing, b.spacing, rtol=1e-6, atol=0):
        raise ValueError(f"geometry mismatch: spacing {a.spacing} vs {b.spacing}")


class VolumeStats(NamedTuple):
    mean: float
    std: float
    min: float
    max: float
    voxel_count: int


def volume_stats(v: Volume, mask: Optional[LabelMask] = None) -> VolumeStats:
    """Population statistics of ``v``, optionally restricted to ``mask`` foreground."""
    if mask is not None:
        check_geometry(v, mask)
        values = v.data[mask.as_bool()]
    else:
        values = v.data.ravel()
    if values.size == 0:
        raise ValueError("empty statistics region")
    values = values.astype(np.float64)
    mean = float(values.mean())
    std = float(np.sqrt(np.mean((values - mean) ** 2)))
    return VolumeStats(mean, std, float(values.min()), float(values.max()), int(values.size))


def foreground_bbox(v) -> BoundingBox:
    """Tightest box around voxels with ``|value| > 0``."""
    nz = np.abs(v.data) > 0
    if not nz.any():
        raise ValueError("no nonzero region")
    lo, hi = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        idx = np.flatnonzero(nz.any(axis=other))
        lo.append(int(idx[0]))
        hi.append(int(idx[-1]))
    return BoundingBox(tuple(lo), tuple(hi))  # type: ignore[arg-type]


def crop(v, box: BoundingBox):
    """Copy the voxels inside ``box``; works for both Volume and LabelMask."""
    box.validate(v.dims)
    return type(v)(v.data[box.slices].copy(), v.spacing)


def uncrop(v, box: BoundingBox, dims: Sequence[int]):
    """Zero-pad ``v`` back into a grid of ``dims`` at the offset of ``box``."""
    box.validate(dims)
    if tuple(box.shape) != v.dims:
        raise ValueError(f"box extent {box.shape} does not match grid dims {v.dims}")
    out = np.zeros(tuple(dims), dtype=v.data.dtype)
    out[box.slices] = v.data
    return type(v)(out, v.spacing)
