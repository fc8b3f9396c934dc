import numpy as np
import pytest

from imbseg.losses import LossSpec, compound_loss, sigmoid
from imbseg.segnet import (
    FULL_SCALE_PRESET,
    CheckpointError,
    ModelParams,
    NetConfig,
    _conv,
    backward,
    backward_logits,
    forward,
    forward_logits,
    init_params,
    layer_table,
    load_checkpoint,
    save_checkpoint,
    zero_params,
)

from gradcheck import network_gradcheck

SMALL = NetConfig(base_channels=2, levels=2)


def naive_conv(x, w):
    """Zero-padded 'same' correlation by explicit loops."""
    B, X, Y, Z, Ci = x.shape
    k = w.shape[0]
    r = k // 2
    xp = np.pad(x, ((0, 0), (r, r), (r, r), (r, r), (0, 0)))
    out = np.zeros((B, X, Y, Z, w.shape[-1]))
    for i, j, l in np.ndindex(X, Y, Z):
        win = xp[:, i : i + k, j : j + k, l : l + k, :]
        out[:, i, j, l, :] = np.einsum("nabcd,abcde->ne", win, w)
    return out


@pytest.mark.parametrize("ci,co", [(1, 3), (2, 2), (4, 3)])
def test_conv_matches_loop_oracle(ci, co):
    rng = np.random.default_rng(ci * 10 + co)
    x = rng.standard_normal((2, 4, 5, 3, ci))
    w = rng.standard_normal((3, 3, 3, ci, co))
    np.testing.assert_allclose(_conv(x, w), naive_conv(x, w), atol=1e-10)


def test_zero_params_give_half_everywhere():
    for cfg in (SMALL, NetConfig()):
        pred = forward(zero_params(cfg), cfg, np.random.default_rng(0).standard_normal((8, 8, 8)))
        np.testing.assert_array_equal(pred.probs, 0.5)


def test_output_shape_and_range():
    cfg = NetConfig(base_channels=4, levels=3)
    P = init_params(cfg, 1)
    pred = forward(P, cfg, np.random.default_rng(1).standard_normal((2, 16, 8, 24)))
    assert pred.probs.shape == (2, 16, 8, 24)
    assert np.all((pred.probs >= 0) & (pred.probs <= 1))
    single = forward(P, cfg, np.zeros((8, 8, 8)))
    assert single.probs.shape == (8, 8, 8)


def test_indivisible_patch_rejected():
    with pytest.raises(ValueError, match="divisible"):
        forward(zero_params(SMALL), SMALL, np.zeros((6, 8, 8)))


def test_init_is_seeded():
    a, b, c = init_params(SMALL, 3), init_params(SMALL, 3), init_params(SMALL, 4)
    assert a.vector.tobytes() == b.vector.tobytes()
    assert a.vector.tobytes() != c.vector.tobytes()


def test_layer_table_channel_cap():
    cfg = NetConfig(base_channels=32, levels=6, max_channels=360)
    shapes = dict(layer_table(cfg))
    assert shapes["enc5.b.w"] == (3, 3, 3, 360, 360)
    assert shapes["enc4.a.w"] == (3, 3, 3, 256, 360)
    assert shapes["head.w"] == (1, 1, 1, 32, 1)
    assert FULL_SCALE_PRESET["net"] == cfg
    assert FULL_SCALE_PRESET["patch_size"] == (256, 224, 56)


def test_zero_loss_gradient_gives_zero_parameter_gradient():
    P = init_params(SMALL, 0)
    x = np.random.default_rng(2).standard_normal((8, 8, 8))
    assert np.all(backward(P, SMALL, x, np.zeros((8, 8, 8))) == 0)


def test_backward_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        backward(init_params(SMALL, 0), SMALL, np.zeros((8, 8, 8)), np.zeros((4, 4, 4)))


def test_only_head_bias_gradient_at_zero_params():
    # with all weights zero every hidden activation is 0, so dL/dhead.b = sum(dL/dp * p(1-p)) = sum(dL/dp)/4
    P = zero_params(SMALL, np.float64)
    g = np.random.default_rng(3).standard_normal((8, 8, 8))
    grad = backward(P, SMALL, np.ones((8, 8, 8)), g)
    a, b = P.offset("head.b")
    assert grad[a] == pytest.approx(g.sum() / 4, rel=1e-12)
    mask = np.ones(grad.size, bool)
    mask[a:b] = False
    assert np.all(grad[mask] == 0)


def test_gradient_matches_frozen_pattern_differences():
    rel_frozen, rel_plain, kink = network_gradcheck(seed=1, shape=(4, 4, 4))
    assert rel_frozen.max() < 1e-3
    assert rel_plain[~kink].max() < 1e-3


def test_frozen_pattern_reproduces_plain_forward():
    P = init_params(SMALL, 5, np.float64)
    x = np.random.default_rng(5).standard_normal((1, 8, 8, 8, 1))
    a, cache = forward_logits(P, SMALL, x)
    pattern = {k: v for k, v in cache.items() if k.endswith(".pos")}
    b, _ = forward_logits(P, SMALL, x, pattern)
    np.testing.assert_array_equal(a, b)


def test_gradient_descent_step_lowers_loss():
    P = init_params(SMALL, 6, np.float64)
    rng = np.random.default_rng(6)
    x = rng.standard_normal((8, 8, 8))
    g = (rng.random((8, 8, 8)) < 0.1).astype(float)
    spec = LossSpec("dice_ce")
    lv = compound_loss(spec, forward(P, SMALL, x).probs, g)
    grad = backward(P, SMALL, x, lv.grad)
    step = ModelParams(P.vector - 1e-3 * grad / np.linalg.norm(grad), P.shapes)
    assert compound_loss(spec, forward(step, SMALL, x).probs, g).value < lv.value


def test_checkpoint_round_trip(tmp_path):
    cfg = NetConfig(base_channels=3, levels=2)
    P = init_params(cfg, 7)
    save_checkpoint(tmp_path / "m.ckpt", P, cfg)
    Q, cfg2 = load_checkpoint(tmp_path / "m.ckpt")
    assert cfg2 == cfg
    assert Q.vector.tobytes() == P.vector.tobytes()
    x = np.random.default_rng(7).standard_normal((8, 8, 8))
    np.testing.assert_array_equal(forward(Q, cfg2, x).probs, forward(P, cfg, x).probs)


def test_checkpoint_errors(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT" + bytes(16))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad.ckpt")
    save_checkpoint(tmp_path / "t.ckpt", init_params(SMALL, 0), SMALL)
    raw = (tmp_path / "t.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError, match="parameters"):
        load_checkpoint(tmp_path / "t.ckpt")


def test_net_config_validation_and_json():
    with pytest.raises(ValueError):
        NetConfig(levels=0)
    with pytest.raises(ValueError):
        NetConfig(kernel_size=2)
    cfg = NetConfig(base_channels=5, levels=3)
    assert NetConfig.from_json(cfg.to_json()) == cfg


def test_probability_space_gradient_is_chain_of_logit_gradient():
    P = init_params(SMALL, 8, np.float64)
    rng = np.random.default_rng(8)
    x = rng.standard_normal((8, 8, 8))
    dp = rng.standard_normal((8, 8, 8))
    logits, cache = forward_logits(P, SMALL, x[None, ..., None])
    p = sigmoid(logits[0])
    direct = backward_logits(P, SMALL, cache, (dp * p * (1 - p))[None])
    np.testing.assert_allclose(backward(P, SMALL, x, dp), direct, rtol=1e-12)


def test_head_bias_gradient_is_sum_of_logit_gradient():
    P = init_params(SMALL, 9, np.float64)
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 8, 8, 8, 1))
    dlogits = rng.standard_normal((2, 8, 8, 8))
    _, cache = forward_logits(P, SMALL, x)
    grad = backward_logits(P, SMALL, cache, dlogits)
    a, _ = P.offset("head.b")
    assert grad[a] == pytest.approx(dlogits.sum(), rel=1e-12)


def test_identical_patches_give_identical_gradients():
    P = init_params(SMALL, 10, np.float64)
    rng = np.random.default_rng(10)
    x = rng.standard_normal((8, 8, 8))
    dp = rng.standard_normal((8, 8, 8))
    single = backward(P, SMALL, x, dp)
    pair = backward(P, SMALL, np.stack([x, x]), np.stack([dp, dp]))
    np.testing.assert_allclose(pair, 2 * single, rtol=1e-12)


def test_head_weights_irrelevant_when_hidden_activations_are_zero():
    P = zero_params(SMALL, np.float64)
    a, b = P.offset("head.w")
    P.vector[a:b] = np.random.default_rng(11).standard_normal(b - a)
    x = np.random.default_rng(12).standard_normal((8, 8, 8))
    before = forward(P, SMALL, x).logits
    P.vector[a:b] *= 2
    np.testing.assert_array_equal(forward(P, SMALL, x).logits, before)
