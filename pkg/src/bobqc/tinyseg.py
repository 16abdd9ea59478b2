"""TinySeg: a small conv-BN-ReLU 3D segmentation net with manual backprop.

Architecture (fixed): three 3x3x3 same-padded conv -> BN -> ReLU blocks with
1 -> 8 -> 8 -> 16 channels, then a 1x1x1 conv head to C classes and a
channelwise softmax.  Everything runs in float64 on numpy.

Tensors are kept channels-last internally, shape ``(B, X, Y, Z, C)``.
Inputs are ``(B, X, Y, Z)`` intensity batches; outputs are ``(B, C, X, Y, Z)``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

CHANNELS = (1, 8, 8, 16)
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
MODES = ("train", "eval", "adapt")
CHECKPOINT_MAGIC = b"TSEGCKPT"
CHECKPOINT_VERSION = 1


class NumericalError(RuntimeError):
    pass


def is_bn_affine(name: str) -> bool:
    return name.endswith(".gamma") or name.endswith(".beta")


def is_buffer(name: str) -> bool:
    return name.endswith(".running_mean") or name.endswith(".running_var")


@dataclass
class TinySegParams:
    """All network tensors in declaration order, plus architecture constants.

    Learnable tensors split into ``bn_names`` (gamma, beta) and
    ``fixed_names`` (conv kernels and biases).  Running statistics are buffers
    and belong to neither set.
    """

    num_classes: int
    tensors: dict[str, np.ndarray]
    seed: int = 0

    @property
    def bn_names(self) -> list[str]:
        return [n for n in self.tensors if is_bn_affine(n)]

    @property
    def fixed_names(self) -> list[str]:
        return [n for n in self.tensors if not is_bn_affine(n) and not is_buffer(n)]

    @property
    def buffer_names(self) -> list[str]:
        return [n for n in self.tensors if is_buffer(n)]

    @property
    def learnable_names(self) -> list[str]:
        return [n for n in self.tensors if not is_buffer(n)]

    def copy(self) -> "TinySegParams":
        return TinySegParams(self.num_classes, {k: v.copy() for k, v in self.tensors.items()}, self.seed)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def digest(self, names: Sequence[str] | None = None) -> str:
        """SHA-256 over the raw bytes of the named tensors (all by default)."""
        h = hashlib.sha256()
        for n in names if names is not None else self.tensors:
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.tensors[n]).tobytes())
        return h.hexdigest()


def init(seed: int, num_classes: int) -> TinySegParams:
    """He-uniform kernels (bound sqrt(6/fan_in)) from numpy's PCG64 seeded by ``seed``."""
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    rng = np.random.Generator(np.random.PCG64(seed))
    t: dict[str, np.ndarray] = {}
    for i in range(1, 4):
        cin, cout = CHANNELS[i - 1], CHANNELS[i]
        bound = np.sqrt(6.0 / (cin * 27))
        t[f"conv{i}.w"] = rng.uniform(-bound, bound, size=(cout, cin, 3, 3, 3))
        t[f"conv{i}.b"] = np.zeros(cout)
        t[f"bn{i}.gamma"] = np.ones(cout)
        t[f"bn{i}.beta"] = np.zeros(cout)
        t[f"bn{i}.running_mean"] = np.zeros(cout)
        t[f"bn{i}.running_var"] = np.ones(cout)
    bound = np.sqrt(6.0 / CHANNELS[-1])
    t["head.w"] = rng.uniform(-bound, bound, size=(num_classes, CHANNELS[-1]))
    t["head.b"] = np.zeros(num_classes)
    return TinySegParams(num_classes, t, seed)


# --- layers -----------------------------------------------------------------

def _im2col(a: np.ndarray) -> np.ndarray:
    """(B, X, Y, Z, Cin) -> (B*X*Y*Z, 27*Cin), offsets ordered (kx, ky, kz)."""
    b, x, y, z, c = a.shape
    p = np.pad(a, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((b, x, y, z, 27, c))
    k = 0
    for i in range(3):
        for j in range(3):
            for m in range(3):
                cols[..., k, :] = p[:, i:i + x, j:j + y, m:m + z, :]
                k += 1
    return cols.reshape(b * x * y * z, 27 * c)


def _col2im(dcols: np.ndarray, shape) -> np.ndarray:
    b, x, y, z, c = shape
    dcols = dcols.reshape(b, x, y, z, 27, c)
    dp = np.zeros((b, x + 2, y + 2, z + 2, c))
    k = 0
    for i in range(3):
        for j in range(3):
            for m in range(3):
                dp[:, i:i + x, j:j + y, m:m + z, :] += dcols[..., k, :]
                k += 1
    return dp[:, 1:-1, 1:-1, 1:-1, :]


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    # (Cout, Cin, 3, 3, 3) -> (27*Cin, Cout), matching _im2col column order
    cout, cin = w.shape[:2]
    return w.transpose(2, 3, 4, 1, 0).reshape(27 * cin, cout)


def _kernel_from_matrix(wm: np.ndarray, cin: int, cout: int) -> np.ndarray:
    return wm.reshape(3, 3, 3, cin, cout).transpose(4, 3, 0, 1, 2)


@dataclass
class ForwardCache:
    mode: str
    input_shape: tuple
    layers: list = field(default_factory=list)
    head_in: np.ndarray | None = None
    logits: np.ndarray | None = None


def _check_finite(a: np.ndarray, layer: int, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"non-finite {what} at layer {layer}")


def forward_logits(
    params: TinySegParams, x: np.ndarray, mode: str = "eval", update_running: bool = True
) -> tuple[np.ndarray, ForwardCache]:
    """Run the network and return channels-last logits ``(B, X, Y, Z, C)`` plus a cache.

    train/adapt normalize with batch statistics and, if ``update_running``,
    move running statistics by momentum 0.1 (unbiased batch variance).
    eval normalizes with running statistics and never mutates ``params``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] < 1:
        raise ValueError(f"input must be (B, X, Y, Z), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericalError("non-finite input")
    batch_stats = mode != "eval"
    if batch_stats and x.size < 2:
        raise ValueError("batch statistics need at least 2 spatial positions")

    t = params.tensors
    cache = ForwardCache(mode, x.shape)
    a = x[..., None]
    for i in range(1, 4):
        cin, cout = CHANNELS[i - 1], CHANNELS[i]
        shape = a.shape
        cols = _im2col(a)
        z = cols @ _kernel_matrix(t[f"conv{i}.w"]) + t[f"conv{i}.b"]
        _check_finite(z, i, "conv output")
        n = z.shape[0]
        if batch_stats:
            mean = z.mean(axis=0)
            var = z.var(axis=0)
            if update_running:
                rm, rv = t[f"bn{i}.running_mean"], t[f"bn{i}.running_var"]
                rm *= 1.0 - BN_MOMENTUM
                rm += BN_MOMENTUM * mean
                rv *= 1.0 - BN_MOMENTUM
                rv += BN_MOMENTUM * var * n / max(n - 1, 1)
        else:
            mean = t[f"bn{i}.running_mean"]
            var = t[f"bn{i}.running_var"]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (z - mean) * inv_std
        y = t[f"bn{i}.gamma"] * xhat + t[f"bn{i}.beta"]
        out = np.maximum(y, 0.0)
        _check_finite(out, i, "activation")
        cache.layers.append((shape, cols, xhat, inv_std, y > 0))
        a = out.reshape(shape[:4] + (cout,))

    h = a.reshape(-1, CHANNELS[-1])
    logits = h @ t["head.w"].T + t["head.b"]
    _check_finite(logits, 4, "logits")
    cache.head_in = h
    cache.logits = logits
    return logits.reshape(a.shape[:4] + (params.num_classes,)), cache


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def forward(params: TinySegParams, x: np.ndarray, mode: str = "eval") -> np.ndarray:
    """Class probabilities, shape ``(B, C, X, Y, Z)``."""
    logits, _ = forward_logits(params, x, mode)
    return np.moveaxis(softmax(logits), -1, 1)


def backward(params: TinySegParams, cache: ForwardCache, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for every learnable tensor.

    ``dlogits`` is the loss gradient w.r.t. the channels-last logits returned
    by ``forward_logits``.  In train/adapt mode gradients flow through the
    batch mean and variance.
    """
    if cache is None or cache.logits is None:
        raise ValueError("backward needs the cache from forward_logits")
    t = params.tensors
    g = dlogits.reshape(-1, params.num_classes)
    grads: dict[str, np.ndarray] = {}
    grads["head.w"] = g.T @ cache.head_in
    grads["head.b"] = g.sum(axis=0)
    da = g @ t["head.w"]

    batch_stats = cache.mode != "eval"
    for i in range(3, 0, -1):
        shape, cols, xhat, inv_std, active = cache.layers[i - 1]
        cin, cout = CHANNELS[i - 1], CHANNELS[i]
        dy = da.reshape(-1, cout) * active
        gamma = t[f"bn{i}.gamma"]
        grads[f"bn{i}.gamma"] = (dy * xhat).sum(axis=0)
        grads[f"bn{i}.beta"] = dy.sum(axis=0)
        dxhat = dy * gamma
        if batch_stats:
            n = dxhat.shape[0]
            dz = (inv_std / n) * (
                n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
            )
        else:
            dz = dxhat * inv_std
        grads[f"conv{i}.w"] = _kernel_from_matrix(cols.T @ dz, cin, cout)
        grads[f"conv{i}.b"] = dz.sum(axis=0)
        if i > 1:
            dcols = dz @ _kernel_matrix(t[f"conv{i}.w"]).T
            da = _col2im(dcols, shape)
    return {n: grads[n] for n in params.learnable_names}


# --- losses -----------------------------------------------------------------

SOFT_DICE_SMOOTH = 1e-5


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return np.eye(num_classes)[labels.reshape(-1)]


def _supervised_terms(p: np.ndarray, logp: np.ndarray, onehot: np.ndarray):
    n = p.shape[0]
    ce = -(logp * onehot).sum() / n
    inter = (p * onehot).sum(axis=0)
    denom = p.sum(axis=0) + onehot.sum(axis=0) + SOFT_DICE_SMOOTH
    dice = (2.0 * inter + SOFT_DICE_SMOOTH) / denom
    return ce, dice, denom


def loss_supervised(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean voxel cross-entropy plus (1 - mean soft Dice over classes).

    ``probs`` is ``(B, C, X, Y, Z)`` (or ``(C, X, Y, Z)``); ``labels`` holds
    class indices of matching spatial shape.
    """
    probs = np.asarray(probs, dtype=np.float64)
    c = probs.shape[-4]
    p = np.moveaxis(probs, -4, -1).reshape(-1, c)
    onehot = _one_hot(labels, c)
    if onehot.shape[0] != p.shape[0]:
        raise ValueError("probability and label shapes do not match")
    with np.errstate(divide="ignore"):
        logp = np.log(p)
    logp = np.where(onehot > 0, logp, 0.0)
    ce, dice, _ = _supervised_terms(p, logp, onehot)
    return float(ce + 1.0 - dice.mean())


def supervised_loss_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Supervised loss and its gradient w.r.t. channels-last logits."""
    c = logits.shape[-1]
    z = logits.reshape(-1, c)
    onehot = _one_hot(labels, c)
    if onehot.shape[0] != z.shape[0]:
        raise ValueError("logit and label shapes do not match")
    logp = log_softmax(z)
    p = np.exp(logp)
    n = z.shape[0]
    ce, dice, denom = _supervised_terms(p, logp, onehot)
    # d(1 - mean_c dice_c)/dp
    dp = -((2.0 * onehot - dice) / denom) / c
    dz = p * (dp - (p * dp).sum(axis=1, keepdims=True))
    dz += (p - onehot) / n
    return float(ce + 1.0 - dice.mean()), dz.reshape(logits.shape)


# --- training ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 4
    seed: int = 0
    ce_weight: float = 1.0
    dice_weight: float = 1.0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def _weighted_loss_grad(logits, labels, cfg: TrainConfig):
    if cfg.ce_weight == 1.0 and cfg.dice_weight == 1.0:
        return supervised_loss_grad(logits, labels)
    c = logits.shape[-1]
    z = logits.reshape(-1, c)
    onehot = _one_hot(labels, c)
    logp = log_softmax(z)
    p = np.exp(logp)
    n = z.shape[0]
    ce, dice, denom = _supervised_terms(p, logp, onehot)
    dp = -cfg.dice_weight * ((2.0 * onehot - dice) / denom) / c
    dz = p * (dp - (p * dp).sum(axis=1, keepdims=True))
    dz += cfg.ce_weight * (p - onehot) / n
    loss = cfg.ce_weight * ce + cfg.dice_weight * (1.0 - dice.mean())
    return float(loss), dz.reshape(logits.shape)


class Adam:
    """Bias-corrected Adam over a named subset of tensors (no weight decay)."""

    def __init__(self, names: Sequence[str], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.names = list(names)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: TinySegParams, grads: dict[str, np.ndarray]) -> None:
        if self.lr == 0:
            return
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for n in self.names:
            g = grads[n]
            m = self.m.setdefault(n, np.zeros_like(g))
            v = self.v.setdefault(n, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params.tensors[n] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(
    params: TinySegParams,
    dataset: Sequence[tuple[np.ndarray, np.ndarray]],
    cfg: TrainConfig,
) -> tuple[TinySegParams, list[float]]:
    """Supervised Adam training; returns a trained copy and per-epoch mean loss.

    ``dataset`` holds (intensity (X,Y,Z), labels (X,Y,Z)) pairs of equal shape.
    Batch order per epoch comes from PCG64 seeded with ``cfg.seed``.
    """
    if not dataset:
        raise ValueError("empty training set")
    params = params.copy()
    xs = np.stack([np.asarray(d[0], dtype=np.float64) for d in dataset])
    ys = np.stack([np.asarray(d[1], dtype=np.int64) for d in dataset])
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    opt = Adam(params.learnable_names, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            logits, cache = forward_logits(params, xs[idx], "train")
            loss, dlogits = _weighted_loss_grad(logits, ys[idx], cfg)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            opt.step(params, backward(params, cache, dlogits))
            losses.append(loss)
        curve.append(float(np.mean(losses)))
        log.info("epoch %d loss %.6f", epoch, curve[-1])
    return params, curve


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(params: TinySegParams, path) -> None:
    """Binary container: magic, version, JSON header, float64 LE tensors in order."""
    names = list(params.tensors)
    header = {
        "version": CHECKPOINT_VERSION,
        "architecture": {"channels": list(CHANNELS), "kernel": 3, "head_kernel": 1},
        "num_classes": params.num_classes,
        "seed": params.seed,
        "tensors": [[n, list(params.tensors[n].shape)] for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params.tensors[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> TinySegParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a TinySeg checkpoint")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    if header["architecture"]["channels"] != list(CHANNELS):
        raise ValueError("checkpoint architecture does not match TinySeg")
    offset = 16 + hlen
    tensors = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        tensors[name] = arr.astype(np.float64)
        offset += 8 * count
    if offset != len(raw):
        raise ValueError(f"checkpoint {path} has trailing or missing bytes")
    return TinySegParams(header["num_classes"], tensors, header["seed"])
