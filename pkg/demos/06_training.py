"""Train both loss groups briefly on one fold and pick the better one.

Forty iterations show the loss falling but are far too few for a useful
validation DSC; the held-out acceptance run trains 300 iterations per model.
"""
from imbseg.losses import LossSpec
from imbseg.preprocess import preprocess_case
from imbseg.segnet import NetConfig
from imbseg.synthgen import SynthSpec, generate_dataset
from imbseg.training import LOSS_GROUPS, Case, TrainConfig, make_folds, select_best_per_fold, train_fold

data = {}
for c in generate_dataset(SynthSpec(seed=1), 10):
    img, seg, _ = preprocess_case(c.image, c.mask, (1.0, 1.0, 1.0))
    data[c.case_id] = Case(c.case_id, img, seg)
folds = make_folds(sorted(data), 5, seed=0)
print("fold sizes:", [len(f.val_case_ids) for f in folds])
results = {}
for group in LOSS_GROUPS:
    tc = TrainConfig(loss=LossSpec(group), patch_size=(16, 16, 16), iterations=40, val_interval=20)
    r = train_fold(data, folds[0], NetConfig(), tc)
    results[(0, group)] = r.best_val_dsc
    print(f"{group}: first loss {r.log[0]['loss']:.3f} last loss {r.log[-1]['loss']:.3f} best val DSC {r.best_val_dsc:.3f}")
print("selected:", select_best_per_fold(results, n_folds=1))
