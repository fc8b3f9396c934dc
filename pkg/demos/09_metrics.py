"""Dice, volumetric similarity and HD95 on hand-built masks."""
import numpy as np

from imbseg.metrics import aggregate, evaluate_case
from imbseg.volume import LabelMask

ref = np.zeros((16, 16, 16), np.uint8)
ref[4:10, 4:10, 4:10] = 1
shifted = np.roll(ref, 2, axis=0)
rows = [
    evaluate_case(LabelMask(ref), LabelMask(ref), "identical"),
    evaluate_case(LabelMask(shifted), LabelMask(ref), "shifted"),
    evaluate_case(LabelMask(np.zeros_like(ref)), LabelMask(ref), "missed"),
]
for r in rows:
    print(f"{r.case_id:10s} DSC {r.dsc:.3f} VS {r.volumetric_similarity:.3f} HD95 {r.hd95}")
print(aggregate(rows))
