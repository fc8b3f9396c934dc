"""Crop to the nonzero region, resample to a target spacing, z-score normalize."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .volume import BoundingBox, LabelMask, Volume, check_geometry, crop, foreground_bbox, uncrop, volume_stats

STD_EPS = 1e-8


@dataclass
class PreprocessRecord:
    original_dims: Tuple[int, int, int]
    crop_box: BoundingBox
    original_spacing: Tuple[float, float, float]
    target_spacing: Tuple[float, float, float]
    normalization: Tuple[float, float]
    constant_image: bool = False
    resampled_dims: Optional[Tuple[int, int, int]] = None

    def to_json(self) -> str:
        d = asdict(self)
        d["crop_box"] = {"lo": list(self.crop_box.lo), "hi": list(self.crop_box.hi)}
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PreprocessRecord":
        d = json.loads(text)
        box = d.pop("crop_box")
        rd = d.pop("resampled_dims", None)
        return cls(
            original_dims=tuple(d.pop("original_dims")),
            crop_box=BoundingBox(tuple(box["lo"]), tuple(box["hi"])),
            original_spacing=tuple(d.pop("original_spacing")),
            target_spacing=tuple(d.pop("target_spacing")),
            normalization=tuple(d.pop("normalization")),
            resampled_dims=tuple(rd) if rd is not None else None,
            **d,
        )


def zscore_normalize(v: Volume) -> Tuple[Volume, float, float]:
    stats = volume_stats(v)
    if stats.std <= STD_EPS:
        return Volume(np.zeros(v.dims, np.float32), v.spacing), stats.mean, stats.std
    out = (v.data.astype(np.float64) - stats.mean) / stats.std
    return Volume(out.astype(np.float32), v.spacing), stats.mean, stats.std


def resampled_dims(dims: Sequence[int], spacing: Sequence[float], target: Sequence[float]) -> Tuple[int, int, int]:
    return tuple(max(1, int(round(n * s / t))) for n, s, t in zip(dims, spacing, target))  # type: ignore[return-value]


def _source_coords(n_out: int, n_src: int, ratio: float) -> np.ndarray:
    # voxel-center alignment: output center i sits at (i + 0.5) * ratio - 0.5 in source index units
    c = (np.arange(n_out) + 0.5) * ratio - 0.5
    return np.clip(c, 0.0, n_src - 1)


def _linear_axis(a: np.ndarray, axis: int, coords: np.ndarray) -> np.ndarray:
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, a.shape[axis] - 1)
    frac = coords - lo
    shape = [1, 1, 1]
    shape[axis] = -1
    frac = frac.reshape(shape)
    return np.take(a, lo, axis=axis) * (1.0 - frac) + np.take(a, hi, axis=axis) * frac


def _nearest_axis(a: np.ndarray, axis: int, coords: np.ndarray) -> np.ndarray:
    idx = np.clip(np.floor(coords + 0.5).astype(np.int64), 0, a.shape[axis] - 1)
    return np.take(a, idx, axis=axis)


def resample_grid(
    data: np.ndarray,
    spacing: Sequence[float],
    target_spacing: Sequence[float],
    mode: str = "trilinear",
    out_dims: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Separable resampling of a raw array; ``out_dims`` overrides the spacing-derived shape."""
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown resampling mode {mode!r}")
    if any(t <= 0 for t in target_spacing):
        raise ValueError(f"target spacing must be positive, got {tuple(target_spacing)}")
    if out_dims is None:
        out_dims = resampled_dims(data.shape, spacing, target_spacing)
    out = data.astype(np.float64) if mode == "trilinear" else data
    for axis in range(3):
        n_src, n_out = data.shape[axis], int(out_dims[axis])
        ratio = target_spacing[axis] / spacing[axis]
        if n_src == n_out and ratio == 1.0:
            continue
        coords = _source_coords(n_out, n_src, ratio)
        out = _linear_axis(out, axis, coords) if mode == "trilinear" else _nearest_axis(out, axis, coords)
    return out


def resample(v, target_spacing: Sequence[float], mode: str = "trilinear"):
    """Resample a Volume (trilinear) or LabelMask (nearest) to ``target_spacing``."""
    target = tuple(float(t) for t in target_spacing)
    out = resample_grid(v.data, v.spacing, target, mode)
    if isinstance(v, LabelMask):
        if mode != "nearest":
            raise ValueError("masks must be resampled with mode='nearest'")
        return LabelMask(out, target)
    return Volume(out.astype(v.data.dtype), target)


def preprocess_case(
    image: Volume,
    mask: Optional[LabelMask],
    target_spacing: Sequence[float],
) -> Tuple[Volume, Optional[LabelMask], PreprocessRecord]:
    if mask is not None:
        check_geometry(image, mask)
    box = foreground_bbox(image)
    img = resample(crop(image, box), target_spacing, "trilinear")
    img, mean, std = zscore_normalize(img)
    out_mask = None
    if mask is not None:
        out_mask = resample(crop(mask, box), target_spacing, "nearest")
    record = PreprocessRecord(
        original_dims=image.dims,
        crop_box=box,
        original_spacing=image.spacing,
        target_spacing=tuple(float(t) for t in target_spacing),  # type: ignore[arg-type]
        normalization=(mean, std),
        constant_image=std <= STD_EPS,
        resampled_dims=img.dims,
    )
    return img, out_mask, record


def restore_to_original(mask: LabelMask, record: PreprocessRecord) -> LabelMask:
    """Map a mask on the preprocessed grid back to the original image grid."""
    expected = record.resampled_dims or resampled_dims(
        record.crop_box.shape, record.original_spacing, record.target_spacing
    )
    if mask.dims != tuple(expected):
        raise ValueError(f"mask dims {mask.dims} do not match preprocessed dims {tuple(expected)}")
    cropped = resample_grid(
        mask.data, record.target_spacing, record.original_spacing, "nearest", out_dims=record.crop_box.shape
    )
    return uncrop(LabelMask(cropped, record.original_spacing), record.crop_box, record.original_dims)


def median_spacing(spacings: Sequence[Sequence[float]]) -> Tuple[float, float, float]:
    """Per-axis median spacing of a dataset."""
    return tuple(float(s) for s in np.median(np.asarray(spacings, dtype=np.float64), axis=0))  # type: ignore[return-value]
