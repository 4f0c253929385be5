"""Training losses."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, _make, as_tensor


def cce_loss(logits: Tensor, target, axis: int = 1) -> Tensor:
    """Categorical cross entropy against one-hot targets, averaged over cells.

    ``logits`` and ``target`` share a shape with classes along ``axis``.
    """
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if logits.shape != target.shape:
        raise ShapeError(f"logits {logits.shape} and target {target.shape} differ")
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    cells = logits.data.size // logits.shape[axis]
    loss = -(target * logp).sum() / cells

    def bw(g):
        p = np.exp(logp)
        logits._accumulate(g * (p * target.sum(axis=axis, keepdims=True) - target) / cells)

    return _make(np.asarray(loss), (logits,), bw, "cce_loss")


def mse_loss(pred: Tensor, target) -> Tensor:
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    pred = as_tensor(pred)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred.data - target
    n = diff.size

    def bw(g):
        pred._accumulate(g * 2.0 * diff / n)

    return _make(np.asarray((diff * diff).sum() / n), (pred,), bw, "mse_loss")
