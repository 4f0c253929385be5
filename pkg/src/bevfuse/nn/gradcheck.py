"""Finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, no_grad

EPS = 1e-4


def relative_error(a, n) -> np.ndarray:
    a, n = np.asarray(a), np.asarray(n)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(
    op: Callable[..., Tensor],
    input_shapes: Sequence[Sequence[int]] = (),
    seed: int = 0,
    eps: float = EPS,
    inputs: Optional[Sequence[np.ndarray]] = None,
    check: Optional[Sequence[bool]] = None,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    The op output is reduced to a scalar with a fixed random projection so
    every output element is exercised.
    """
    rng = np.random.default_rng(seed)
    if inputs is None:
        inputs = [rng.standard_normal(s) for s in input_shapes]
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    check = [True] * len(arrays) if check is None else list(check)
    tensors = [Tensor(a, requires_grad=c) for a, c in zip(arrays, check)]
    out = op(*tensors)
    proj = rng.standard_normal(out.shape)

    def scalar(vals):
        return float((op(*[Tensor(v) for v in vals]).data * proj).sum())

    out.backward(proj)
    worst = 0.0
    for k, (a, t) in enumerate(zip(arrays, tensors)):
        if not check[k]:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(a)
        numeric = np.zeros_like(a)
        flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = scalar(arrays)
            flat[i] = orig - eps
            fm = scalar(arrays)
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
        worst = max(worst, float(relative_error(analytic, numeric).max()))
    return worst


def grad_check_tensors(fn: Callable[[], Tensor], tensors: Sequence[Tensor], seed: int = 0, eps: float = EPS) -> float:
    """Like grad_check, but perturbs existing tensors (e.g. module parameters) in place.

    ``fn`` rebuilds the output from ``tensors`` on every call.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    out = fn()
    proj = rng.standard_normal(out.shape)
    out.backward(proj)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    worst = 0.0
    with no_grad():
        for t, a in zip(tensors, analytic):
            numeric = np.zeros_like(t.data)
            for idx in np.ndindex(t.data.shape):
                orig = t.data[idx]
                t.data[idx] = orig + eps
                fp = float((fn().data * proj).sum())
                t.data[idx] = orig - eps
                fm = float((fn().data * proj).sum())
                t.data[idx] = orig
                numeric[idx] = (fp - fm) / (2 * eps)
            worst = max(worst, float(relative_error(a, numeric).max()))
    return worst
