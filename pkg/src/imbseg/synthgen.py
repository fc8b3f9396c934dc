"""Synthetic, extremely imbalanced 3D cases.

Each case is dark Gaussian noise crossed by bright tubular "vessels" with
zero to three small ellipsoidal "aneurysm" blobs budding off them. Only blob
voxels are foreground; vessels are look-alike distractors.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, replace
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .postprocess import label_components
from .volume import LabelMask, Volume

# Foreground ratio of the real TOF-MRA data. At 64^3 this is well under one
# voxel, so generated cases target a relaxed band instead.
REAL_DATA_FOREGROUND_RATIO = 6.5e-6
MAX_ATTEMPTS = 5
MIN_BLOB_VOXELS = 7


@dataclass(frozen=True)
class SynthSpec:
    dims: Tuple[int, int, int] = (64, 64, 64)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_blobs: int = 1
    blob_radius_range: Tuple[float, float] = (1.5, 3.0)
    vessel_count: int = 3
    vessel_radius: float = 1.5
    background_sigma: float = 1.0
    vessel_intensity: float = 3.0
    blob_intensity: float = 4.0
    smoothing_sigma: float = 0.5
    border: int = 4
    ratio_band: Tuple[float, float] = (1e-4, 1e-3)
    seed: int = 0

    def __post_init__(self):
        if min(self.dims) < 16:
            raise ValueError(f"dims must be >= 16 per axis, got {self.dims}")
        if not 0 <= self.n_blobs <= 3:
            raise ValueError("n_blobs must lie in 0..3")
        lo, hi = self.blob_radius_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid blob radius range {self.blob_radius_range}")
        if self.vessel_radius <= 0:
            raise ValueError("vessel_radius must be positive")
        a, b = self.ratio_band
        if not 0 < a <= b < 0.5:
            raise ValueError(f"ratio band must lie in (0, 0.5), got {self.ratio_band}")
        if self.border < 0 or 2 * self.border >= min(self.dims):
            raise ValueError("border leaves no interior")


def ellipsoid_mask(dims, center, radii) -> np.ndarray:
    """Voxels whose centre satisfies sum(((i - c) / r)^2) <= 1."""
    grids = np.ogrid[tuple(slice(0, n) for n in dims)]
    q = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return q <= 1.0


def _vessel_centerline(rng, dims) -> np.ndarray:
    dims_a = np.asarray(dims, dtype=np.float64)
    start = rng.uniform(0.15, 0.85, 3) * dims_a
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    perp = np.cross(direction, rng.standard_normal(3))
    perp /= np.linalg.norm(perp)
    length = 2.0 * float(dims_a.max())
    t = np.arange(-length / 2, length / 2, 0.5)
    amp, freq, phase = rng.uniform(2, 6), rng.uniform(0.03, 0.08), rng.uniform(0, 2 * np.pi)
    pts = start + np.outer(t, direction) + np.outer(amp * np.sin(freq * t + phase), perp)
    inside = np.all((pts >= 0) & (pts <= dims_a - 1), axis=1)
    return pts[inside]


def _attempt(spec: SynthSpec, rng: np.random.Generator):
    dims = spec.dims
    centerline = np.zeros(dims, bool)
    lines = []
    for _ in range(spec.vessel_count):
        pts = _vessel_centerline(rng, dims)
        if len(pts):
            lines.append(pts)
            idx = np.round(pts).astype(int)
            centerline[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    if centerline.any():
        vessel = ndimage.distance_transform_edt(~centerline) <= spec.vessel_radius
    else:
        vessel = centerline

    lo, hi = spec.blob_radius_range
    blob = np.zeros(dims, bool)
    blobs = []
    candidates = np.concatenate(lines) if lines else None
    for _ in range(spec.n_blobs):
        for _try in range(200):
            radii = tuple(float(r) for r in rng.uniform(lo, hi, 3))
            if candidates is not None:
                anchor = candidates[rng.integers(len(candidates))]
                offset = rng.standard_normal(3)
                offset *= (spec.vessel_radius + 0.6 * max(radii)) / np.linalg.norm(offset)
                center = anchor + offset
            else:
                center = rng.uniform(0, 1, 3) * (np.asarray(dims) - 1)
            margin = spec.border + max(radii) + 1
            if np.any(center < margin) or np.any(center > np.asarray(dims) - 1 - margin):
                continue
            if any(np.linalg.norm(center - np.asarray(b["center"])) < max(radii) + max(b["radii"]) + 3 for b in blobs):
                continue
            region = ellipsoid_mask(dims, center, radii)
            if region.sum() < MIN_BLOB_VOXELS:
                continue
            blob |= region
            blobs.append({"center": [float(c) for c in center], "radii": list(radii), "voxels": int(region.sum())})
            break
        else:
            return None
    image = rng.normal(0.0, spec.background_sigma, dims)
    image += np.maximum(spec.vessel_intensity * vessel, spec.blob_intensity * blob)
    if spec.smoothing_sigma > 0:
        image = ndimage.gaussian_filter(image, spec.smoothing_sigma, mode="nearest")
    if spec.border:
        b = spec.border
        shell = np.ones(dims, bool)
        shell[b:-b, b:-b, b:-b] = False
        image[shell] = 0.0
    return image, blob, blobs


def generate_case(spec: SynthSpec) -> Tuple[Volume, LabelMask, dict]:
    """Build one case; deterministic in ``spec.seed``.

    Blob-bearing cases are regenerated (with derived seeds) until the foreground
    ratio falls inside ``spec.ratio_band`` and every blob is a single
    26-connected component.
    """
    n_vox = int(np.prod(spec.dims))
    lo, hi = spec.ratio_band
    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng([spec.seed, attempt])
        out = _attempt(spec, rng)
        if out is None:
            continue
        image, blob, blobs = out
        ratio = blob.sum() / n_vox
        if spec.n_blobs and not lo <= ratio <= hi:
            continue
        mask = LabelMask(blob, spec.spacing)
        if label_components(mask).count != spec.n_blobs:
            continue
        meta = {
            "seed": spec.seed,
            "attempt": attempt,
            "n_blobs": spec.n_blobs,
            "blobs": blobs,
            "foreground_voxels": int(blob.sum()),
            "foreground_ratio": float(ratio),
            "real_data_foreground_ratio": REAL_DATA_FOREGROUND_RATIO,
        }
        return Volume(image.astype(np.float32), spec.spacing), mask, meta
    raise RuntimeError(f"could not generate a valid case for seed {spec.seed} in {MAX_ATTEMPTS} attempts")


@dataclass
class SynthCase:
    case_id: str
    image: Volume
    mask: LabelMask
    meta: dict


def aneurysm_free_count(n_cases: int, fraction: float) -> int:
    return int(round(n_cases * fraction))


def generate_dataset(
    spec: SynthSpec,
    n_cases: int,
    aneurysm_free_fraction: float = 0.18,
    max_blobs: int = 3,
    prefix: str = "case",
) -> List[SynthCase]:
    """``n_cases`` cases; per-case seeds and blob counts derive from ``spec.seed`` and the case index."""
    return [make_case(spec, *job) for job in dataset_jobs(spec, n_cases, aneurysm_free_fraction, max_blobs, prefix)]


def dataset_jobs(spec: SynthSpec, n_cases: int, aneurysm_free_fraction: float = 0.18, max_blobs: int = 3, prefix: str = "case"):
    """(case_id, seed, n_blobs) per case; each job can be built independently with :func:`make_case`."""
    if n_cases < 1:
        raise ValueError("cases must be ≥ 1")
    if not 0 <= aneurysm_free_fraction <= 1:
        raise ValueError("aneurysm_free_fraction must lie in [0, 1]")
    plan = case_plan(spec.seed, n_cases, aneurysm_free_fraction, max_blobs)
    return [(f"{prefix}_{i:03d}", seed, n) for i, (seed, n) in enumerate(plan)]


def case_plan(master_seed: int, n_cases: int, aneurysm_free_fraction: float, max_blobs: int = 3):
    """(seed, n_blobs) for each case index."""
    rng = np.random.default_rng([master_seed, 0xA11])
    free = set(rng.permutation(n_cases)[: aneurysm_free_count(n_cases, aneurysm_free_fraction)].tolist())
    out = []
    for i in range(n_cases):
        seed = int(np.random.SeedSequence([master_seed, i]).generate_state(1)[0])
        n_blobs = 0 if i in free else int(np.random.default_rng(seed).integers(1, max_blobs + 1))
        out.append((seed, n_blobs))
    return out


def make_case(spec: SynthSpec, case_id: str, seed: int, n_blobs: int) -> SynthCase:
    image, mask, meta = generate_case(replace(spec, seed=seed, n_blobs=n_blobs))
    return SynthCase(case_id, image, mask, meta)


def write_dataset(cases: List[SynthCase], out_dir, spec: Optional[SynthSpec] = None) -> None:
    """Paired NIfTI files under ``images/`` and ``masks/`` plus ``manifest.json``."""
    from .nifti import write_mask, write_volume

    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    entries = []
    for c in cases:
        write_volume(c.image, os.path.join(out_dir, "images", c.case_id + ".nii.gz"))
        write_mask(c.mask, os.path.join(out_dir, "masks", c.case_id + ".nii.gz"))
        entries.append({"case_id": c.case_id, **c.meta})
    manifest = {"spec": asdict(spec) if spec is not None else None, "cases": entries}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
