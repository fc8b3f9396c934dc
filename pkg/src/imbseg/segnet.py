"""Miniature 3D U-Net with hand-written forward and backward passes.

Tensors are channels-last, ``(batch, x, y, z, channels)``. Each resolution
level holds two 3x3x3 convolutions with leaky-ReLU; levels are joined by 2x2x2
average pooling on the way down and by nearest upsampling followed by a
1x1x1 convolution on the way up, with skip concatenation. A final 1x1x1
convolution yields a single logit channel.

The 1x1x1 up-convolution is evaluated *before* upsampling; for a pointwise
convolution and nearest upsampling the two orders are identical.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .losses import Prediction, sigmoid


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    base_channels: int = 8
    levels: int = 2
    max_channels: int = 320
    kernel_size: int = 3
    negative_slope: float = 0.01

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")

    def channels(self, level: int) -> int:
        return min(self.base_channels * 2**level, self.max_channels)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetConfig":
        return cls(**json.loads(text))


# Full-scale network from the original method: 3D full-resolution nnU-Net with
# the channel cap raised to 360, trained on 256x224x56 patches. Kept for
# reference only; a single forward pass at this size does not fit desk-scale
# budgets in pure numpy.
FULL_SCALE_PRESET = {
    "net": NetConfig(base_channels=32, levels=6, max_channels=360),
    "patch_size": (256, 224, 56),
    "batch_size": 2,
    "runnable": False,
}


def layer_table(cfg: NetConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Ordered (name, shape) pairs for every weight and bias tensor."""
    k = cfg.kernel_size
    table: List[Tuple[str, Tuple[int, ...]]] = []

    def conv(name, kk, ci, co):
        table.append((name + ".w", (kk, kk, kk, ci, co)))
        table.append((name + ".b", (co,)))

    ci = cfg.in_channels
    for lvl in range(cfg.levels):
        co = cfg.channels(lvl)
        conv(f"enc{lvl}.a", k, ci, co)
        conv(f"enc{lvl}.b", k, co, co)
        ci = co
    for lvl in reversed(range(cfg.levels - 1)):
        co = cfg.channels(lvl)
        conv(f"up{lvl}", 1, cfg.channels(lvl + 1), co)
        conv(f"dec{lvl}.a", k, 2 * co, co)
        conv(f"dec{lvl}.b", k, co, co)
    conv("head", 1, cfg.channels(0), 1)
    return table


@dataclass
class ModelParams:
    vector: np.ndarray
    shapes: List[Tuple[str, Tuple[int, ...]]]
    seed: int = 0
    _offsets: Dict[str, Tuple[int, int]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        total = 0
        self._offsets = {}
        for name, shape in self.shapes:
            n = int(np.prod(shape))
            self._offsets[name] = (total, total + n)
            total += n
        if self.vector.ndim != 1 or self.vector.size != total:
            raise ValueError(f"parameter vector has {self.vector.size} entries, layer table needs {total}")

    def __getitem__(self, name: str) -> np.ndarray:
        a, b = self._offsets[name]
        shape = dict(self.shapes)[name]
        return self.vector[a:b].reshape(shape)

    def view(self) -> Dict[str, np.ndarray]:
        return {name: self.vector[a:b].reshape(shape) for (name, shape), (a, b) in zip(self.shapes, self._offsets.values())}

    def copy(self) -> "ModelParams":
        return ModelParams(self.vector.copy(), list(self.shapes), self.seed)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.vector.astype(dtype), list(self.shapes), self.seed)

    def offset(self, name: str) -> Tuple[int, int]:
        return self._offsets[name]


def init_params(cfg: NetConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """He-normal weights (leaky-ReLU gain), zero biases."""
    rng = np.random.default_rng(seed)
    shapes = layer_table(cfg)
    chunks = []
    gain = 2.0 / (1.0 + cfg.negative_slope**2)
    for name, shape in shapes:
        if name.endswith(".b"):
            chunks.append(np.zeros(shape))
        else:
            fan_in = int(np.prod(shape[:-1]))
            chunks.append(rng.standard_normal(shape) * np.sqrt(gain / fan_in))
    vec = np.concatenate([c.ravel() for c in chunks]).astype(dtype)
    return ModelParams(vec, shapes, seed)


def zero_params(cfg: NetConfig, dtype=np.float32) -> ModelParams:
    shapes = layer_table(cfg)
    return ModelParams(np.zeros(sum(int(np.prod(s)) for _, s in shapes), dtype), shapes)


# ---------------------------------------------------------------- primitives


def _conv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Same-padded correlation, no bias. x: (B,X,Y,Z,Ci), w: (k,k,k,Ci,Co)."""
    k = w.shape[0]
    B, X, Y, Z, Ci = x.shape
    Co = w.shape[-1]
    if k == 1:
        return x @ w[0, 0, 0]
    r = k // 2
    xp = np.pad(x, ((0, 0), (r, r), (r, r), (r, r), (0, 0)))
    if Ci <= 2:
        # thin input: one im2col matmul beats k^3 rank-Ci updates
        col = np.empty((B, X, Y, Z, k, k, k, Ci), x.dtype)
        for a in range(k):
            for b in range(k):
                for c in range(k):
                    col[:, :, :, :, a, b, c, :] = xp[:, a : a + X, b : b + Y, c : c + Z, :]
        return (col.reshape(-1, k**3 * Ci) @ w.reshape(-1, Co)).reshape(B, X, Y, Z, Co)
    out = np.zeros((B, X, Y, Z, Co), x.dtype)
    for a in range(k):
        for b in range(k):
            for c in range(k):
                out += xp[:, a : a + X, b : b + Y, c : c + Z, :] @ w[a, b, c]
    return out


def _conv_forward(x, w, b):
    out = _conv(x, w)
    out += b
    return out


def _conv_backward(x, w, dout):
    """Gradients of a same-padded conv w.r.t. input, weight and bias."""
    k = w.shape[0]
    Ci, Co = w.shape[3], w.shape[4]
    db = dout.reshape(-1, Co).sum(axis=0)
    if k == 1:
        dw = (x.reshape(-1, Ci).T @ dout.reshape(-1, Co)).reshape(w.shape)
        dx = dout @ w[0, 0, 0].T
        return dx, dw, db
    B, X, Y, Z, _ = x.shape
    r = k // 2
    xp = np.pad(x, ((0, 0), (r, r), (r, r), (r, r), (0, 0)))
    d2 = dout.reshape(-1, Co)
    dw = np.empty_like(w)
    for a in range(k):
        for b in range(k):
            for c in range(k):
                dw[a, b, c] = xp[:, a : a + X, b : b + Y, c : c + Z, :].reshape(-1, Ci).T @ d2
    # input gradient is a correlation with the spatially flipped, transposed kernel
    wt = np.ascontiguousarray(w[::-1, ::-1, ::-1].swapaxes(3, 4))
    dx = _conv(dout, wt)
    return dx, dw, db


def _lrelu(z, pos, slope):
    return np.where(pos, z, z * slope)


def _lrelu_backward(pos, dout, slope):
    return np.where(pos, dout, dout * slope)


def _pool(x):
    B, X, Y, Z, C = x.shape
    return x.reshape(B, X // 2, 2, Y // 2, 2, Z // 2, 2, C).mean(axis=(2, 4, 6))


def _pool_backward(dout):
    d = dout / 8
    return d.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)


def _upsample(x):
    return x.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)


def _upsample_backward(dout):
    B, X, Y, Z, C = dout.shape
    return dout.reshape(B, X // 2, 2, Y // 2, 2, Z // 2, 2, C).sum(axis=(2, 4, 6))


# ---------------------------------------------------------------- network

DENORMAL_FLUSH = 1e-20


def _as_batch(patch, dtype) -> np.ndarray:
    arr = patch.data if hasattr(patch, "data") and not isinstance(patch, np.ndarray) else np.asarray(patch)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim == 4:
        arr = arr[..., None]
    if arr.ndim != 5:
        raise ValueError(f"expected a (B,X,Y,Z) batch or a single (X,Y,Z) patch, got shape {arr.shape}")
    return np.ascontiguousarray(arr, dtype=dtype)


def check_patch_dims(dims: Sequence[int], cfg: NetConfig) -> None:
    m = 2**cfg.levels
    if any(int(d) % m for d in dims):
        raise ValueError(f"patch dims {tuple(dims)} must be divisible by {m} for a {cfg.levels}-level network")


def forward_logits(params: ModelParams, cfg: NetConfig, x: np.ndarray, pattern=None):
    """Run the network on a channels-last batch. Returns ``(logits, cache)``.

    ``pattern`` optionally fixes which leaky-ReLU branch each pre-activation
    takes (a dict of boolean arrays keyed like the ``.pos`` cache entries).
    With a frozen pattern the network is smooth in its parameters, which is
    what finite-difference checks need; its gradient at the point the pattern
    was recorded equals the gradient of the unfrozen network.
    """
    check_patch_dims(x.shape[1:4], cfg)
    P = params.view()
    s = cfg.negative_slope
    cache = {"x": x}
    skips = []
    h = x
    for lvl in range(cfg.levels):
        if lvl > 0:
            h = _pool(h)
        for part in ("a", "b"):
            name = f"enc{lvl}.{part}"
            cache[name + ".in"] = h
            z = _conv_forward(h, P[name + ".w"], P[name + ".b"])
            pos = z > 0 if pattern is None else pattern[name + ".pos"]
            cache[name + ".pos"] = pos
            h = _lrelu(z, pos, s)
        skips.append(h)
    for lvl in reversed(range(cfg.levels - 1)):
        name = f"up{lvl}"
        cache[name + ".in"] = h
        u = _upsample(_conv_forward(h, P[name + ".w"], P[name + ".b"]))
        h = np.concatenate([u, skips[lvl]], axis=-1)
        for part in ("a", "b"):
            name = f"dec{lvl}.{part}"
            cache[name + ".in"] = h
            z = _conv_forward(h, P[name + ".w"], P[name + ".b"])
            pos = z > 0 if pattern is None else pattern[name + ".pos"]
            cache[name + ".pos"] = pos
            h = _lrelu(z, pos, s)
    cache["head.in"] = h
    logits = _conv_forward(h, P["head.w"], P["head.b"])[..., 0]
    return logits, cache


def backward_logits(params: ModelParams, cfg: NetConfig, cache, dlogits: np.ndarray) -> np.ndarray:
    """Parameter gradient given ``dL/dlogits`` and the cache of :func:`forward_logits`."""
    P = params.view()
    s = cfg.negative_slope
    grads: Dict[str, np.ndarray] = {}

    def conv_back(name, dout):
        dx, dw, db = _conv_backward(cache[name + ".in"], P[name + ".w"], dout)
        grads[name + ".w"] = dw
        grads[name + ".b"] = db
        return dx

    d = dlogits.astype(params.vector.dtype)
    if d.dtype == np.float32:
        # saturated voxels give |dL/dlogit| ~ 1e-30; left alone they turn into
        # float32 subnormals downstream and slow every matmul several-fold
        d[np.abs(d) < DENORMAL_FLUSH] = 0.0
    dh = conv_back("head", d[..., None])
    dskips: Dict[int, np.ndarray] = {}
    for lvl in range(cfg.levels - 1):
        for part in ("b", "a"):
            name = f"dec{lvl}.{part}"
            dh = conv_back(name, _lrelu_backward(cache[name + ".pos"], dh, s))
        c = cfg.channels(lvl)
        dskips[lvl] = dh[..., c:]
        dh = conv_back(f"up{lvl}", _upsample_backward(dh[..., :c]))
    for lvl in reversed(range(cfg.levels)):
        if lvl in dskips:
            dh = dh + dskips[lvl]
        for part in ("b", "a"):
            name = f"enc{lvl}.{part}"
            dh = conv_back(name, _lrelu_backward(cache[name + ".pos"], dh, s))
        if lvl > 0:
            dh = _pool_backward(dh)
    return np.concatenate([grads[name].ravel() for name, _ in params.shapes]).astype(params.vector.dtype)


def forward(params: ModelParams, cfg: NetConfig, patch) -> Prediction:
    """Foreground prediction for one patch ``(X,Y,Z)`` or a batch ``(B,X,Y,Z)``."""
    x = _as_batch(patch, params.vector.dtype)
    logits, _ = forward_logits(params, cfg, x)
    if np.ndim(getattr(patch, "data", patch)) == 3:
        logits = logits[0]
    return Prediction.from_logits(logits)


def backward(params: ModelParams, cfg: NetConfig, patch, loss_grad) -> np.ndarray:
    """Parameter gradient for ``dL/dp`` given on the probability grid of ``patch``."""
    x = _as_batch(patch, params.vector.dtype)
    logits, cache = forward_logits(params, cfg, x)
    loss_grad = np.asarray(loss_grad)
    if loss_grad.shape != logits.shape and loss_grad.shape != logits.shape[1:]:
        raise ValueError(f"loss_grad shape {loss_grad.shape} does not match prediction shape {logits.shape}")
    p = sigmoid(logits)
    dlogits = loss_grad.reshape(logits.shape) * p * (1.0 - p)
    return backward_logits(params, cfg, cache, dlogits)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"IMBSEG01"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ModelParams, cfg: NetConfig) -> None:
    """``IMBSEG01`` + uint32 LE length + NetConfig JSON + float32 LE parameters."""
    meta = cfg.to_json().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        fh.write(params.vector.astype("<f4").tobytes())


def load_checkpoint(path) -> Tuple[ModelParams, NetConfig]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {raw[:8]!r})")
    (n,) = struct.unpack("<I", raw[8:12])
    cfg = NetConfig.from_json(raw[12 : 12 + n].decode("utf-8"))
    shapes = layer_table(cfg)
    total = sum(int(np.prod(s)) for _, s in shapes)
    body = raw[12 + n :]
    if len(body) != 4 * total:
        raise CheckpointError(f"{path}: expected {total} parameters, found {len(body) // 4}")
    vec = np.frombuffer(body, dtype="<f4").astype(np.float32)
    return ModelParams(vec, shapes), cfg
