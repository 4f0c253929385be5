"""Dense float64 tensors with reverse-mode automatic differentiation.

Each op records its parents and a closure that maps the output gradient to
parent gradients. ``Tensor.backward`` walks the graph in reverse topological
order. Graph construction is skipped inside ``no_grad()`` or when no input
requires a gradient.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ShapeError

_GRAD_ENABLED = True
DEBUG = os.environ.get("BEVFUSE_DEBUG", "") not in ("", "0")


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, parents: Sequence["Tensor"] = (), backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._backward = backward
        self.op = op

    # -- basics ---------------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: List[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.broadcast_to(np.asarray(grad, dtype=np.float64), self.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # Interior gradients are not needed after propagation.
                    node.grad = None

    def nodes(self) -> List["Tensor"]:
        """All tensors reachable from this one (graph introspection)."""
        out, seen, stack = [], set(), [self]
        while stack:
            n = stack.pop()
            if id(n) in seen:
                continue
            seen.add(id(n))
            out.append(n)
            stack.extend(n._parents)
        return out

    # -- operator sugar -------------------------------------------------------

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(as_tensor(o), self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _make(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward, op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw, "div")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        x._accumulate(g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), bw, "relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bw(g):
        x._accumulate(g * (1.0 - out * out))

    return _make(out, (x,), bw, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def bw(g):
        x._accumulate(g * out * (1.0 - out))

    return _make(out, (x,), bw, "sigmoid")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        x._accumulate(g * out)

    return _make(out, (x,), bw, "exp")


def log(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(g / x.data)

    return _make(np.log(x.data), (x,), bw, "log")


def square(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(2.0 * g * x.data)

    return _make(x.data * x.data, (x,), bw, "square")


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g / n, x.shape))

    return _make(np.mean(x.data, axis=axis, keepdims=keepdims), (x,), bw, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        x._accumulate(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def bw(g):
        x._accumulate(g.transpose(inv))

    return _make(x.data.transpose(axes), (x,), bw, "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        full[idx] += g
        x._accumulate(full)

    return _make(x.data[idx], (x,), bw, "getitem")


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                x._accumulate(g[tuple(sl)])

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, bw, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling of an NCHW tensor."""
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bw(g):
        n, c, h, w = x.shape
        x._accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _make(out, (x,), bw, "upsample2x")


def sparse_resample(x: Tensor, matrix, out_hw: Tuple[int, int]) -> Tensor:
    """Apply a fixed sparse linear map over the flattened spatial dims.

    ``x`` is (N, C, *in_spatial); ``matrix`` is (out_cells, in_cells).
    """
    n, c = x.shape[:2]
    flat = x.data.reshape(n * c, -1)
    if flat.shape[1] != matrix.shape[1]:
        raise ShapeError(f"resampler expects {matrix.shape[1]} input cells, got {flat.shape[1]}")
    out = np.asarray((matrix @ flat.T).T).reshape(n, c, *out_hw)

    def bw(g):
        gi = np.asarray((matrix.T @ g.reshape(n * c, -1).T).T)
        x._accumulate(gi.reshape(x.shape))

    return _make(out, (x,), bw, "sparse_resample")


# ---------------------------------------------------------------------------
# softmax family


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        x._accumulate(g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _make(out, (x,), bw, "log_softmax")


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, kh, kw, stride, dilation, oh, ow) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, oh, ow))
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            patch = xp[:, :, r0 : r0 + stride * (oh - 1) + 1 : stride, c0 : c0 + stride * (ow - 1) + 1 : stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols


def _col2im(cols: np.ndarray, padded_shape, kh, kw, stride, dilation, oh, ow) -> np.ndarray:
    out = np.zeros(padded_shape)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            out[:, :, r0 : r0 + stride * (oh - 1) + 1 : stride, c0 : c0 + stride * (ow - 1) + 1 : stride] += cols[
                :, i, j
            ].transpose(1, 0, 2, 3)
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return x if p == 0 else np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _crop(x: np.ndarray, p: int) -> np.ndarray:
    return x if p == 0 else x[:, :, p:-p, p:-p]


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """Cross-correlation of NCHW ``x`` with OIHW ``w`` (zero padding)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OIHW weights")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, weights expect {ci}")
    oh = conv_output_size(h, kh, stride, padding, dilation)
    ow = conv_output_size(wd, kw, stride, padding, dilation)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: input {h}x{wd} too small for kernel/dilation")
    xp = _pad(x.data, padding)
    cols = _im2col(xp, kh, kw, stride, dilation, oh, ow).reshape(c * kh * kw, n * oh * ow)
    w2 = w.data.reshape(o, -1)
    out = (w2 @ cols).reshape(o, n, oh, ow).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data.reshape(1, o, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        if w.requires_grad:
            w._accumulate((g2 @ cols.T).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(c, kh, kw, n, oh, ow)
            x._accumulate(_crop(_col2im(gcols, xp.shape, kh, kw, stride, dilation, oh, ow), padding))

    return _make(np.ascontiguousarray(out), parents, bw, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution; ``w`` is (in_channels, out_channels, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv_transpose2d expects NCHW input and IOHW weights")
    n, c, h, wd = x.shape
    ci, o, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv_transpose2d: input has {c} channels, weights expect {ci}")
    full_h = (h - 1) * stride + kh
    full_w = (wd - 1) * stride + kw
    if full_h - 2 * padding <= 0 or full_w - 2 * padding <= 0:
        raise ShapeError("conv_transpose2d: padding removes the whole output")
    x2 = x.data.transpose(1, 0, 2, 3).reshape(c, -1)
    w2 = w.data.reshape(c, -1)
    cols = (w2.T @ x2).reshape(o, kh, kw, n, h, wd)
    out = _crop(_col2im(cols, (n, o, full_h, full_w), kh, kw, stride, 1, h, wd), padding)
    if b is not None:
        out = out + b.data.reshape(1, o, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gp = _pad(g, padding)
        gcols = _im2col(gp, kh, kw, stride, 1, h, wd).reshape(o * kh * kw, -1)
        if x.requires_grad:
            x._accumulate((w2 @ gcols).reshape(c, n, h, wd).transpose(1, 0, 2, 3))
        if w.requires_grad:
            w._accumulate((x2 @ gcols.T).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))

    return _make(np.ascontiguousarray(out), parents, bw, "conv_transpose2d")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation of NCHW input.

    In training mode the batch statistics are used and the running buffers
    are updated in place (unbiased variance, like the usual convention).
    """
    axes = (0, 2, 3)
    c = x.shape[1]
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        m = x.data.size // c
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(c) * (m / max(m - 1, 1))
    else:
        mu = running_mean.reshape(1, c, 1, 1)
        var = running_var.reshape(1, c, 1, 1)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    g4 = gamma.data.reshape(1, c, 1, 1)
    out = xhat * g4 + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * g4
            if training:
                m = x.data.size // c
                dx = inv / m * (
                    m * dxhat - dxhat.sum(axis=axes, keepdims=True) - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                )
            else:
                dx = dxhat * inv
            x._accumulate(dx)

    return _make(out, (x, gamma, beta), bw, "batch_norm")
