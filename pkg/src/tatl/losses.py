"""Tversky, soft-Jaccard and combined segmentation losses with exact gradients.

Every loss takes a probability map ``pred`` and a binary ``target`` of the
same number of elements, flattens both, and returns ``(value, grad)``
where ``grad`` has ``pred``'s shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, RangeError


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0    # smoothing term, keeps y = pred = 0 defined
    beta: float = 0.6     # Tversky weight of false negatives
    lambda1: float = 0.5  # Tversky weight in the combined objective
    lambda2: float = 0.5  # Jaccard weight in the combined objective

    def __post_init__(self):
        if not self.alpha > 0:
            raise RangeError(f"alpha must be > 0, got {self.alpha}")
        if not 0 < self.beta < 1:
            raise RangeError(f"beta must lie in (0, 1), got {self.beta}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise RangeError("lambda1 and lambda2 must be >= 0")


DEFAULT_LOSS = LossConfig()


def _flatten(pred, target):
    p = np.asarray(pred, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if p.size != y.size:
        raise DimensionError(f"pred has {p.size} elements, target has {y.size}")
    if not np.all((p >= 0.0) & (p <= 1.0)):
        raise RangeError("pred values must lie in [0, 1]")
    return p.ravel(), y.ravel(), p.shape


def tversky_loss(pred, target, cfg: LossConfig = DEFAULT_LOSS):
    p, y, shape = _flatten(pred, target)
    inter = y @ p
    fn = y.sum() - inter          # <1 - p, y>
    fp = p.sum() - inter          # <p, 1 - y>
    num = cfg.alpha + inter
    den = num + cfg.beta * fn + (1.0 - cfg.beta) * fp
    # d(den)/dp is the constant 1 - beta
    grad = -(y * den - num * (1.0 - cfg.beta)) / den**2
    return 1.0 - num / den, grad.reshape(shape)


def jaccard_loss(pred, target, cfg: LossConfig = DEFAULT_LOSS):
    p, y, shape = _flatten(pred, target)
    inter = y @ p
    num = cfg.alpha + inter
    den = cfg.alpha + y.sum() + p.sum() - inter
    grad = -(y * den - num * (1.0 - y)) / den**2
    return 1.0 - num / den, grad.reshape(shape)


def combined_loss(pred, target, cfg: LossConfig = DEFAULT_LOSS):
    """``lambda1 * tversky + lambda2 * jaccard`` for a single sample."""
    tv, gt = tversky_loss(pred, target, cfg)
    jv, gj = jaccard_loss(pred, target, cfg)
    return cfg.lambda1 * tv + cfg.lambda2 * jv, cfg.lambda1 * gt + cfg.lambda2 * gj


def batch_loss(preds, targets, cfg: LossConfig = DEFAULT_LOSS):
    """Mean combined loss over the leading (sample) axis.

    ``preds`` is ``(n, ...)``; ``targets`` must hold ``n`` samples with the
    same number of elements each. The gradient is already divided by ``n``.
    """
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets)
    n = preds.shape[0]
    if n == 0 or targets.shape[0] != n:
        raise DimensionError(f"batch sizes differ: {preds.shape} vs {targets.shape}")
    grad = np.empty_like(preds)
    total = 0.0
    for i in range(n):
        v, g = combined_loss(preds[i], targets[i], cfg)
        total += v
        grad[i] = g
    return total / n, grad / n
