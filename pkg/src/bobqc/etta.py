"""Entropy test-time adaptation of BatchNorm parameters.

Procedures mirror the usual four-step recipe: freeze everything but BN,
recalibrate BN running statistics on test data, fine-tune BN scale/shift by
gradient descent on mean voxel entropy, then infer in eval mode.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tinyseg as ts

log = logging.getLogger(__name__)

ADAPT_MODES = ("stats", "entropy", "both")
MAX_HALVINGS = 20


@dataclass(frozen=True)
class AdaptConfig:
    mode: str = "both"
    steps: int = 10
    lr: float = 1e-3
    stats_epochs: int = 1
    backtrack: bool = True

    def __post_init__(self):
        if self.mode not in ADAPT_MODES:
            raise ValueError(f"mode must be one of {ADAPT_MODES}, got {self.mode!r}")
        if self.steps < 0 or self.stats_epochs < 0:
            raise ValueError("steps and stats_epochs must be >= 0")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")


def _entropy_terms(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms


def entropy_map(probs: np.ndarray) -> np.ndarray:
    """Per-voxel entropy -sum_c p log p (0 log 0 = 0); class axis is first.

    Accepts ``(C, X, Y, Z)`` or batched ``(B, C, X, Y, Z)``.
    """
    p = np.asarray(probs, dtype=np.float64)
    axis = 0 if p.ndim == 4 else 1
    return _entropy_terms(p).sum(axis=axis)


def entropy_loss(probs: np.ndarray) -> float:
    """Mean over voxels of the per-voxel entropy."""
    return float(entropy_map(probs).mean())


def entropy_loss_grad(logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Entropy loss and its gradient w.r.t. channels-last logits."""
    c = logits.shape[-1]
    z = logits.reshape(-1, c)
    logp = ts.log_softmax(z)
    p = np.exp(logp)
    h = -(p * logp).sum(axis=1)
    n = z.shape[0]
    dz = -p * (logp + h[:, None]) / n
    return float(h.mean()), dz.reshape(logits.shape)


def freeze_except_bn(params: ts.TinySegParams) -> list[str]:
    """Names of the tensors adaptation may update by gradient (gamma, beta)."""
    return params.bn_names


def update_bn_statistics(params: ts.TinySegParams, inputs: Sequence[np.ndarray], epochs: int = 1) -> ts.TinySegParams:
    """Return a copy whose running statistics absorb ``epochs`` sweeps over ``inputs``.

    Each input (one volume or a batch) is one forward pass in adapt mode;
    only running_mean / running_var move.
    """
    out = params.copy()
    if epochs and not len(inputs):
        raise ValueError("no test inputs for BN statistics")
    for _ in range(epochs):
        for x in inputs:
            ts.forward_logits(out, x, "adapt", update_running=True)
    return out


def _entropy_and_bn_grads(params, x, update_running):
    logits, cache = ts.forward_logits(params, x, "adapt", update_running=update_running)
    h, dlogits = entropy_loss_grad(logits)
    grads = ts.backward(params, cache, dlogits)
    return h, {n: grads[n] for n in freeze_except_bn(params)}


def _entropy_at(params, x) -> float:
    logits, _ = ts.forward_logits(params, x, "adapt", update_running=False)
    return entropy_loss_grad(logits)[0]


def fine_tune_bn(params: ts.TinySegParams, x: np.ndarray, steps: int, lr: float, backtrack: bool = True):
    """Gradient descent on the entropy loss over gamma/beta only, in place.

    Each step runs one adapt-mode forward (batch statistics; like a
    training-mode pass it also moves the running statistics), backpropagates
    the entropy and updates gamma/beta.  Returns the entropy trace: the value
    before the first step, then the value after each step.  With
    ``backtrack`` a step that would raise entropy is retried with the
    learning rate halved, up to 20 times; the reduced rate is kept.
    """
    names = freeze_except_bn(params)
    h = _entropy_at(params, x)
    trace = [h]
    for step in range(1, steps + 1):
        h, grads = _entropy_and_bn_grads(params, x, update_running=True)
        before = {n: params.tensors[n].copy() for n in names}
        for halving in range(MAX_HALVINGS + 1):
            for n in names:
                params.tensors[n] = before[n] - lr * grads[n]
            h_new = _entropy_at(params, x)
            if not backtrack or h_new <= h or halving == MAX_HALVINGS:
                break
            lr *= 0.5
        if not math.isfinite(h_new):
            raise ts.NumericalError(f"non-finite entropy at adaptation step {step}")
        trace.append(h_new)
        log.debug("adapt step %d entropy %.6g lr %.3g", step, h_new, lr)
    return trace


def adapt(params: ts.TinySegParams, x: np.ndarray, cfg: AdaptConfig = AdaptConfig()):
    """Adapt a private copy of ``params`` to test input ``x``.

    Returns ``(adapted_params, trace)``; ``trace`` has ``steps + 1`` entropy
    values (adapt mode) and a single value in stats-only mode.  Conv kernels
    and biases are never touched.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    out = params.copy()
    if cfg.mode in ("stats", "both"):
        out = update_bn_statistics(out, [x], cfg.stats_epochs)
    if cfg.mode == "stats":
        return out, [_entropy_at(out, x)]
    trace = fine_tune_bn(out, x, cfg.steps, cfg.lr, cfg.backtrack)
    return out, trace


def infer(params: ts.TinySegParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode probabilities ``(C, X, Y, Z)`` and argmax labels for one volume.

    Ties go to the lowest class index (numpy argmax semantics).
    """
    x = np.asarray(x, dtype=np.float64)
    probs = ts.forward(params, x[None] if x.ndim == 3 else x, "eval")[0]
    return probs, np.argmax(probs, axis=0)
