"""Write a volume and a mask to gzipped NIfTI-1 and read them back."""
import gzip
import os
import tempfile

import numpy as np

from imbseg import nifti
from imbseg.volume import LabelMask, Volume

rng = np.random.default_rng(0)
vol = Volume(rng.standard_normal((5, 6, 7)).astype(np.float32), (0.5, 0.5, 1.2))
mask = LabelMask(rng.integers(0, 2, (5, 6, 7)), vol.spacing)
with tempfile.TemporaryDirectory() as d:
    vp, mp = os.path.join(d, "img.nii.gz"), os.path.join(d, "seg.nii.gz")
    nifti.write_volume(vol, vp)
    nifti.write_mask(mask, mp)
    v2, m2 = nifti.read_volume(vp), nifti.read_mask(mp)
    raw = gzip.decompress(open(mp, "rb").read())
print("volume bytes identical:", v2.data.tobytes() == vol.data.tobytes(), "spacing", v2.spacing)
print("mask identical:", np.array_equal(m2.data, mask.data))
print("sizeof_hdr bytes:", raw[:4].hex(), "magic:", raw[344:348])
