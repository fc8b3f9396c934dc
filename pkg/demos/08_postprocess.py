"""Remove connected components smaller than 11 voxels."""
import numpy as np

from imbseg.postprocess import label_components, remove_small_components
from imbseg.volume import LabelMask

m = np.zeros((20, 20, 20), np.uint8)
m[2:12, 2, 2] = 1  # 10 voxels
m[2:13, 5, 5] = 1  # 11 voxels
m[10:15, 10:15, 10:15] = 1  # 125 voxels
m[18, 18, 18] = 1
mask = LabelMask(m)
print("sizes before:", label_components(mask).sizes.tolist())
out, removed = remove_small_components(mask)
print("removed", removed, "sizes after:", label_components(out).sizes.tolist())
diag = np.zeros((3, 3, 3), np.uint8)
diag[0, 0, 0] = diag[1, 1, 1] = 1
for conn in (6, 18, 26):
    print(f"two corner-touching voxels, connectivity {conn}: {label_components(LabelMask(diag), conn).count} components")
