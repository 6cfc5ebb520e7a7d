"""Training objectives and optimizers.

Reconstruction is scored by a weighted pixel MSE; segmentation by a weighted
sum of pixel cross-entropy and soft Dice. Adam and AdamW follow their
defining updates with bias correction; AdamW decays weights before the
moment update.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from lowbridge.tensor import Tensor, log_softmax_channels, mean, softmax_channels, tsum

__all__ = [
    "LossWeights",
    "OptimizerState",
    "loss_gen",
    "loss_ce",
    "loss_dice",
    "loss_seg",
    "one_hot",
    "optimizer_step",
    "make_optimizer",
]


@dataclass(frozen=True)
class LossWeights:
    alpha_g: float = 1.0
    alpha_ce: float = 1.0
    alpha_dice: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{k} must be a finite non-negative weight, got {v}")


def _target_array(target, like: Tensor) -> np.ndarray:
    arr = target.data if isinstance(target, Tensor) else np.asarray(target)
    return arr.astype(like.dtype, copy=False)


def loss_gen(g: Tensor, x, w: LossWeights = LossWeights()) -> Tensor:
    """alpha_g times the mean squared pixel error between ``g`` and ``x``."""
    target = _target_array(x, g)
    if target.shape != g.shape:
        raise ValueError(f"loss_gen: generated dims {g.dims} differ from target dims {list(target.shape)}")
    diff = g - Tensor(target, dtype=g.dtype)
    loss = mean(diff ** 2)
    return loss if w.alpha_g == 1.0 else loss * w.alpha_g


def _check_labels(logits: Tensor, y) -> np.ndarray:
    if logits.ndim != 4:
        raise ValueError(f"logits must be N,n,H,W; got dims {logits.dims}")
    labels = np.asarray(y)
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ValueError(f"labels dims {list(labels.shape)} do not match logits N,H,W {[n, h, w]}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise ValueError("labels must be integer class indices")
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k}): found values in [{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64, copy=False)


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(N, H, W) class indices -> (N, n, H, W) one-hot."""
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=dtype)
    np.put_along_axis(out, labels[:, None].astype(np.intp), 1, axis=1)
    return out


def loss_ce(logits: Tensor, y) -> Tensor:
    """Mean over pixels of -log softmax(logits)[true class], via log-sum-exp."""
    labels = _check_labels(logits, y)
    logp = log_softmax_channels(logits)
    picked = np.take_along_axis(logp.data, labels[:, None], axis=1)
    count = labels.size
    value = np.asarray(-picked.sum() / count, dtype=logits.dtype)
    hot = one_hot(labels, logits.shape[1], logits.dtype)

    def _backward(g):
        return (hot * (-g / count),)

    return Tensor.from_op(value, (logp,), _backward, "nll")


def loss_dice(logits: Tensor, y, smooth: float = 1.0) -> Tensor:
    """1 - mean over classes of (2 sum p*y + s) / (sum p + sum y + s), p = softmax."""
    labels = _check_labels(logits, y)
    n_cls = logits.shape[1]
    p = softmax_channels(logits)
    hot = Tensor(one_hot(labels, n_cls, logits.dtype), dtype=logits.dtype)
    axes = (0, 2, 3)
    inter = tsum(p * hot, axes)
    psum = tsum(p, axes)
    ysum = Tensor(hot.data.sum(axis=axes), dtype=logits.dtype)
    dice = (inter * 2.0 + smooth) / (psum + ysum + smooth)
    return 1.0 - mean(dice)


def loss_seg(logits: Tensor, y, w: LossWeights = LossWeights(), smooth: float = 1.0) -> Tensor:
    """alpha_ce * CE + alpha_dice * Dice; zero-weight terms are skipped entirely."""
    if w.alpha_ce == 0 and w.alpha_dice == 0:
        raise ValueError("segmentation objective is degenerate: alpha_ce = alpha_dice = 0")
    terms = []
    if w.alpha_ce:
        ce = loss_ce(logits, y)
        terms.append(ce if w.alpha_ce == 1.0 else ce * w.alpha_ce)
    if w.alpha_dice:
        dl = loss_dice(logits, y, smooth)
        terms.append(dl if w.alpha_dice == 1.0 else dl * w.alpha_dice)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.kind == "adam" and self.weight_decay:
            raise ValueError("plain Adam takes no weight decay; use kind='adamw'")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def make_optimizer(kind: str, lr: float, weight_decay: float | None = None) -> OptimizerState:
    if kind == "adamw":
        return OptimizerState(kind="adamw", lr=lr, weight_decay=0.01 if weight_decay is None else weight_decay)
    return OptimizerState(kind=kind, lr=lr)


def _named_params(params) -> list[tuple[str, Tensor]]:
    if hasattr(params, "items"):
        return list(params.items())
    return [(str(i), p) for i, p in enumerate(params)]


def optimizer_step(state: OptimizerState, params) -> None:
    """One Adam/AdamW update of every parameter. Gradients are left in place."""
    named = _named_params(params)
    for name, p in named:
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in named:
        dt = p.data.dtype.type
        theta = p.data
        if state.kind == "adamw" and state.weight_decay:
            theta = theta * dt(1.0 - state.lr * state.weight_decay)
        g = p.grad.astype(p.data.dtype, copy=False)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = dt(state.beta1) * m + dt(1.0 - state.beta1) * g
        v = dt(state.beta2) * v + dt(1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / dt(bc1)
        v_hat = v / dt(bc2)
        p.data = theta - dt(state.lr) * m_hat / (np.sqrt(v_hat) + dt(state.eps))
