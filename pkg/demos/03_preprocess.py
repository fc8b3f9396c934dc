"""Crop, resample to a target spacing, z-score, then map a mask back to the original grid."""
import numpy as np

from imbseg.preprocess import preprocess_case, restore_to_original
from imbseg.synthgen import SynthSpec, generate_case

image, mask, _ = generate_case(SynthSpec(seed=3, n_blobs=2))
img, seg, rec = preprocess_case(image, mask, (2.0, 2.0, 2.0))
print("original", image.dims, image.spacing, "-> preprocessed", img.dims, img.spacing)
print(f"z-scored mean {img.data.mean():.3f} std {img.data.std():.3f}")
back = restore_to_original(seg, rec)
overlap = (back.data & mask.data).sum() / max(mask.data.sum(), 1)
print("restored dims", back.dims, f"fraction of reference voxels recovered {overlap:.2f}")
