import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imbseg.losses import LossSpec
from imbseg.segnet import NetConfig, init_params, zero_params
from imbseg.synthgen import SynthSpec, generate_case
from imbseg.training import (
    LOSS_GROUPS,
    Case,
    NesterovSGD,
    PatchSampler,
    TrainConfig,
    loss_and_grad,
    make_folds,
    poly_lr,
    select_best_per_fold,
    train_fold,
    validate_fold,
    write_log_csv,
)
from imbseg.volume import LabelMask, Volume

NET = NetConfig(base_channels=2, levels=2)

# validation DSC per fold for the two loss groups as reported for the original method
TABLE1 = {
    0: (0.4370, 0.4921),
    1: (0.5476, 0.4888),
    2: (0.5108, 0.4926),
    3: (0.6173, 0.5998),
    4: (0.4404, 0.5240),
}


def table1_results():
    return {(f, g): v[i] for f, v in TABLE1.items() for i, g in enumerate(LOSS_GROUPS)}


def small_dataset(n=5, dims=(32, 32, 32)):
    spec = SynthSpec(dims=dims, ratio_band=(5e-4, 8e-3), blob_radius_range=(1.5, 2.0))
    out = {}
    for i in range(n):
        img, mask, _ = generate_case(SynthSpec(**{**spec.__dict__, "seed": i, "n_blobs": 1 if i % 4 else 0}))
        out[f"c{i}"] = Case(f"c{i}", img, mask)
    return out


# ---------------------------------------------------------------- folds


def test_folds_113_sizes():
    ids = [f"case_{i:03d}" for i in range(113)]
    folds = make_folds(ids, seed=0)
    assert [len(f.val_case_ids) for f in folds] == [23, 23, 23, 22, 22]


def test_folds_five_cases_and_determinism():
    ids = list("abcde")
    folds = make_folds(ids, seed=3)
    assert all(len(f.val_case_ids) == 1 for f in folds)
    assert make_folds(ids, seed=3) == folds
    with pytest.raises(ValueError):
        make_folds(list("abcd"))


@settings(max_examples=50, deadline=None)
@given(st.integers(5, 200), st.integers(0, 2**32 - 1))
def test_fold_partition_properties(n, seed):
    ids = [f"id{i}" for i in range(n)]
    folds = make_folds(ids, seed=seed)
    vals = [set(f.val_case_ids) for f in folds]
    assert sorted(c for v in vals for c in v) == sorted(ids)
    sizes = [len(v) for v in vals]
    assert max(sizes) - min(sizes) <= 1
    for f in folds:
        assert set(f.train_case_ids) | set(f.val_case_ids) == set(ids)
        assert not set(f.train_case_ids) & set(f.val_case_ids)


# ---------------------------------------------------------------- selection


def test_table1_selection():
    picks = dict(select_best_per_fold(table1_results()))
    assert {f for f, g in picks.items() if g == "dice_ce"} == {1, 2, 3}
    assert {f for f, g in picks.items() if g == "dice_topk"} == {0, 4}


def test_selection_ties_and_single_group():
    equal = {(f, g): 0.5 for f in range(5) for g in LOSS_GROUPS}
    assert all(g == "dice_ce" for _, g in select_best_per_fold(equal))
    single = {(f, "dice_topk"): 0.1 * f for f in range(5)}
    assert all(g == "dice_topk" for _, g in select_best_per_fold(single))


def test_selection_incomplete_table():
    r = table1_results()
    del r[(2, "dice_topk")]
    with pytest.raises(ValueError, match="incomplete"):
        select_best_per_fold(r)
    with pytest.raises(ValueError):
        select_best_per_fold({})


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([np.sqrt, np.exp, lambda v: 3 * v + 7, lambda v: v**3, np.log1p]))
def test_selection_monotone_invariance(fn):
    r = table1_results()
    assert select_best_per_fold({k: float(fn(v)) for k, v in r.items()}) == select_best_per_fold(r)


# ---------------------------------------------------------------- sampling and schedule


def test_poly_schedule():
    assert poly_lr(0.01, 0, 100) == 0.01
    assert poly_lr(0.01, 50, 100) == pytest.approx(0.01 * 0.5**0.9)
    lrs = [poly_lr(0.01, t, 300) for t in range(300)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


def test_oversampling_fraction():
    data = small_dataset(5)
    tc = TrainConfig(patch_size=(16, 16, 16), batch_size=2, seed=0)
    sampler = PatchSampler(list(data.values()), tc)
    draws = hits = 0
    for t in range(150):
        _, y = sampler.batch(t)
        draws += len(y)
        hits += int(sum(yy.any() for yy in y))
    assert draws == 300
    assert hits / draws >= 0.33


def test_oversampling_rule_counts():
    data = small_dataset(5)
    for b, forced in ((1, 1), (2, 1), (3, 1), (6, 2), (9, 3)):
        s = PatchSampler(list(data.values()), TrainConfig(batch_size=b))
        assert s.n_forced == forced
        assert [s.forced(j) for j in range(b)] == [j >= b - forced for j in range(b)]


def test_sampler_is_reproducible_per_iteration():
    data = small_dataset(5)
    tc = TrainConfig(patch_size=(16, 16, 16), seed=4)
    a = PatchSampler(list(data.values()), tc)
    b = PatchSampler(list(data.values()), tc)
    for t in (7, 0, 3):
        xa, ya = a.batch(t)
        xb, yb = b.batch(t)
        assert xa.tobytes() == xb.tobytes() and ya.tobytes() == yb.tobytes()


def test_nesterov_step_hand_values():
    opt = NesterovSGD(1, 0.9, dtype=np.float64)
    theta = np.array([1.0])
    opt.step(theta, np.array([1.0]), 0.1)  # v = 1, step = 1 + 0.9
    assert theta[0] == pytest.approx(1 - 0.19)
    opt.step(theta, np.array([1.0]), 0.1)  # v = 1.9, step = 1 + 1.71
    assert theta[0] == pytest.approx(1 - 0.19 - 0.271)


# ---------------------------------------------------------------- training


def test_zero_iterations_returns_init():
    data = small_dataset(5)
    fold = make_folds(list(data), seed=0)[0]
    tc = TrainConfig(patch_size=(16, 16, 16), iterations=0, seed=2)
    res = train_fold(data, fold, NET, tc)
    assert res.final_params.vector.tobytes() == init_params(NET, 2).vector.tobytes()
    assert res.log == []


def test_training_is_bit_deterministic(tmp_path):
    data = small_dataset(5)
    fold = make_folds(list(data), seed=1)[2]
    tc = TrainConfig(patch_size=(16, 16, 16), iterations=6, log_interval=2, seed=5)
    a = train_fold(data, fold, NET, tc)
    b = train_fold(data, fold, NET, tc)
    assert a.final_params.vector.tobytes() == b.final_params.vector.tobytes()
    assert a.log == b.log
    assert a.best_val_dsc is not None
    write_log_csv(a.log, tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "iteration,loss,lr,val_dsc"
    lrs = [float(line.split(",")[2]) for line in lines[1:]]
    assert all(x > y for x, y in zip(lrs, lrs[1:]))


def test_empty_training_set():
    data = small_dataset(5)
    fold = make_folds(list(data), seed=0)[0]
    empty = type(fold)(0, (), fold.val_case_ids)
    with pytest.raises(ValueError, match="empty training set"):
        train_fold(data, empty, NET, TrainConfig(patch_size=(16, 16, 16), iterations=1))


def test_loss_decreases_on_fixed_batch_across_seeds():
    net = NetConfig()
    img, mask, _ = generate_case(SynthSpec(n_blobs=2, seed=0))
    centre = np.argwhere(mask.data)[0]
    p = 16
    decreased = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        xs, ys = [], []
        for _ in range(2):
            o = [int(np.clip(c - p // 2 + rng.integers(-4, 5), 0, 64 - p)) for c in centre]
            sl = tuple(slice(a, a + p) for a in o)
            d = img.data[sl]
            xs.append((d - d.mean()) / d.std())
            ys.append(mask.data[sl])
        x, y = np.stack(xs).astype(np.float32), np.stack(ys).astype(np.float64)
        params = init_params(net, seed)
        opt = NesterovSGD(params.vector.size, 0.99)
        first = None
        for t in range(50):
            value, grad = loss_and_grad(params, net, LossSpec("dice_ce"), x, y)
            first = value if first is None else first
            norm = np.linalg.norm(grad)
            if norm > 12:
                grad = grad * (12 / norm)
            opt.step(params.vector, grad, poly_lr(0.01, t, 50))
        last, _ = loss_and_grad(params, net, LossSpec("dice_ce"), x, y)
        decreased += last < first
    assert decreased >= 19


# ---------------------------------------------------------------- validation


def test_validate_all_background_and_random():
    empty = Volume(np.random.default_rng(0).standard_normal((16, 16, 16)).astype(np.float32))
    data = {f"e{i}": Case(f"e{i}", empty, LabelMask(np.zeros((16, 16, 16)))) for i in range(5)}
    fold = make_folds(list(data))[0]
    bg = zero_params(NET)
    a, _ = bg.offset("head.b")
    bg.vector[a] = -5.0
    assert validate_fold(bg, NET, fold, data, (16, 16, 16)) == 1.0

    synth = small_dataset(10)
    fold = make_folds([k for k in synth if synth[k].mask.count], seed=0)[0]
    scores = [validate_fold(init_params(NET, s), NET, fold, synth, (16, 16, 16)) for s in range(3)]
    assert np.mean(scores) < 0.05


def test_validate_perfect_prediction():
    # all-foreground truth and a network that predicts foreground everywhere
    img = Volume(np.zeros((16, 16, 16), np.float32))
    data = {f"f{i}": Case(f"f{i}", img, LabelMask(np.ones((16, 16, 16)))) for i in range(5)}
    fg = zero_params(NET)
    a, _ = fg.offset("head.b")
    fg.vector[a] = 5.0
    assert validate_fold(fg, NET, make_folds(list(data))[1], data, (16, 16, 16)) == 1.0


def test_train_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(iterations=-1)
    tc = TrainConfig(loss=LossSpec("dice_topk"), patch_size=(16, 16, 32), iterations=7, seed=3)
    assert TrainConfig.from_dict(tc.to_dict()) == tc
