"""Segmentation loss, Dice metric and the AdamW optimizer."""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from pemma import autodiff as ad
from pemma.autodiff import Tensor
from pemma.exceptions import DataError, NumericError, ShapeError

DICE_SMOOTH = 1e-5


def _one_hot(labels: np.ndarray, classes: int, dtype) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise DataError("labels must be integer class indices")
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DataError(f"label out of range [0, {classes})")
    return np.eye(classes, dtype=dtype)[labels]


def dice_ce_components(logits: Tensor, labels, class_weights=None, smooth: float = DICE_SMOOTH) -> tuple[Tensor, Tensor]:
    """(soft Dice loss over foreground classes, weighted voxel cross-entropy).

    ``logits`` is (B, ..., C) and ``labels`` (B, ...).
    """
    classes = logits.shape[-1]
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    onehot = _one_hot(labels, classes, logits.dtype)
    logp = ad.log_softmax(logits, axis=-1)

    w = np.ones(classes, dtype=logits.dtype) if class_weights is None else np.asarray(class_weights, dtype=logits.dtype)
    weighted = onehot * w
    ce = -ad.sum(logp * weighted) / float(weighted.sum())

    probs = ad.exp(logp)
    spatial = tuple(range(1, logits.ndim - 1))
    inter = ad.sum(probs * onehot, axis=spatial)
    denom = ad.sum(probs, axis=spatial) + onehot.sum(axis=spatial)
    dice = (inter * 2.0 + smooth) / (denom + smooth)
    dice_loss = ad.mean(1.0 - dice[:, 1:]) if classes > 1 else ad.mean(1.0 - dice)
    return dice_loss, ce


def dice_ce_loss(logits: Tensor, labels, class_weights=None, smooth: float = DICE_SMOOTH) -> Tensor:
    """Equal-weight mean of soft Dice loss and cross-entropy."""
    dice_loss, ce = dice_ce_components(logits, labels, class_weights, smooth)
    return (dice_loss + ce) * 0.5


def dice_score(pred, gt, cls: int) -> float:
    """Hard Dice 2|P & G| / (|P| + |G|); 1.0 when both are empty."""
    p = np.asarray(pred) == cls
    g = np.asarray(gt) == cls
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ")
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def cosine_lr(step: int, lr0: float, total_steps: int, lr_min: float = 0.0) -> float:
    """Cosine annealing from ``lr0`` at step 0 to ``lr_min`` at ``total_steps``."""
    if total_steps <= 0:
        return lr0
    t = min(max(step, 0), total_steps)
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / total_steps))


class AdamW:
    """Adam with decoupled weight decay and a cosine learning-rate schedule.

    Frozen parameters are dropped at construction and never touched.
    """

    def __init__(self, params: Iterable, lr: float = 1e-3, weight_decay: float = 1e-5,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, total_steps: int | None = None):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.total_steps = total_steps
        self.step_count = 0
        self.state: dict[int, tuple[np.ndarray, np.ndarray, int]] = {}

    def current_lr(self) -> float:
        if self.total_steps is None:
            return self.lr
        return cosine_lr(self.step_count, self.lr, self.total_steps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        lr_t = self.current_lr()
        for p in self.params:
            if p.grad is None or not p.requires_grad:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NumericError("non-finite gradient")
            m, v, t = self.state.get(id(p), (np.zeros_like(p.data), np.zeros_like(p.data), 0))
            t += 1
            if self.weight_decay:
                p.data = p.data * p.data.dtype.type(1.0 - lr_t * self.weight_decay)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            p.data = (p.data - lr_t * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)
            self.state[id(p)] = (m, v, t)
        self.step_count += 1
        return lr_t


def adamw_step(params, grads, state: dict, lr_t: float, weight_decay: float,
               betas=(0.9, 0.999), eps: float = 1e-8) -> list[np.ndarray]:
    """Functional single AdamW step on plain arrays; ``state`` is updated in place."""
    b1, b2 = betas
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g)
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
        m, v, t = state.get(i, (np.zeros_like(p), np.zeros_like(p), 0))
        t += 1
        p = p * (1.0 - lr_t * weight_decay)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr_t * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        state[i] = (m, v, t)
        out.append(p)
    return out
