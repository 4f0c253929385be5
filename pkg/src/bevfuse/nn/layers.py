"""Parameterised layers and the content-aware dilated convolution."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import NetworkError, ShapeError
from . import tensor as T
from .tensor import Tensor, parameter


class Module:
    """Minimal container: ordered parameters, buffers and child modules."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._children: "OrderedDict[str, Module]" = OrderedDict()
        self.training = True

    def add_param(self, name: str, data) -> Tensor:
        t = parameter(data)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, data) -> np.ndarray:
        arr = np.array(data, dtype=np.float64)
        self._buffers[name] = arr
        return arr

    def add_child(self, name: str, m: "Module") -> "Module":
        self._children[name] = m
        return m

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for k, v in self._params.items():
            yield prefix + k, v
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for k, v in self._buffers.items():
            yield prefix + k, v
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((k, p.data) for k, p in self.named_parameters())
        out.update(self.named_buffers())
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise ShapeError(f"checkpoint is missing {sorted(missing)[:3]}...")
        for k, arr in state.items():
            target = own[k].data if k in own else bufs.get(k)
            if target is None:
                raise ShapeError(f"checkpoint has unexpected entry {k!r}")
            if target.shape != tuple(arr.shape):
                raise ShapeError(f"{k}: checkpoint shape {tuple(arr.shape)} != model shape {target.shape}")
            target[...] = arr

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for c in self._children.values():
            c.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kw):
        return self.forward(*args, **kw)


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    def __init__(self, cin, cout, k=3, stride=1, padding=None, dilation=1, bias=True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.dilation = stride, dilation
        self.padding = dilation * (k // 2) if padding is None else padding
        self.weight = self.add_param("weight", _he(rng, (cout, cin, k, k), cin * k * k))
        self.bias = self.add_param("bias", np.zeros(cout)) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, k, stride=2, padding=0, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.padding = stride, padding
        self.weight = self.add_param("weight", _he(rng, (cin, cout, k, k), cin * k * k // (stride * stride)))
        self.bias = self.add_param("bias", np.zeros(cout))

    def forward(self, x):
        return T.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, c, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = self.add_param("gamma", np.ones(c))
        self.beta = self.add_param("beta", np.zeros(c))
        self.running_mean = self.add_buffer("running_mean", np.zeros(c))
        self.running_var = self.add_buffer("running_var", np.ones(c))

    def forward(self, x):
        return T.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )


class ConvBNReLU(Module):
    def __init__(self, cin, cout, k=3, stride=1, rng=None):
        super().__init__()
        self.conv = self.add_child("conv", Conv2d(cin, cout, k, stride, bias=False, rng=rng))
        self.bn = self.add_child("bn", BatchNorm2d(cout))

    def forward(self, x):
        return T.relu(self.bn(self.conv(x)))


# ---------------------------------------------------------------------------
# content-aware dilation


@dataclass(frozen=True)
class DilationField:
    """Per-position probabilities over the candidate dilations, (H, W, |D|)."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 3:
            raise ShapeError("DilationField expects an (H, W, |D|) array")
        if np.any(p < 0) or np.max(np.abs(p.sum(axis=-1) - 1.0)) > 1e-9:
            raise ShapeError("dilation probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "probs", p)

    @classmethod
    def from_tensor(cls, t, sample: int = 0) -> "DilationField":
        data = t.data if isinstance(t, Tensor) else np.asarray(t)
        return cls(data[sample].transpose(1, 2, 0))


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def gumbel_softmax(logits: Tensor, tau: float, noise=None, axis: int = 1) -> Tensor:
    """softmax((logits + g) / tau) along ``axis``; ``noise`` holds Gumbel(0,1) draws or None."""
    if not tau > 0:
        raise NetworkError(f"temperature must be positive, got {tau}")
    z = logits if noise is None else T.add(logits, np.asarray(noise, dtype=np.float64))
    return T.softmax(T.mul(z, 1.0 / tau), axis=axis)


def markov_hidden_prior(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                        prev: Optional[Tensor] = None, prev_weight: Optional[Tensor] = None) -> Tensor:
    """Dilation logits from the current layer input via a 1x1 projection and tanh.

    With ``prev``/``prev_weight`` the previous layer's prior is mixed in
    (full recurrent aggregation); without them it is the Markov form.
    """
    z = T.conv2d(x, weight, bias)
    if prev is not None and prev_weight is not None:
        z = T.add(z, T.conv2d(prev, prev_weight))
    return T.tanh(z)


def adaptive_dilated_conv(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor],
    dilations: Sequence[int],
    prior_weight: Tensor,
    prior_bias: Optional[Tensor],
    tau: float,
    noise=None,
    hard: bool = False,
    prior_prev: Optional[Tensor] = None,
    prior_prev_weight: Optional[Tensor] = None,
    return_aux: bool = False,
):
    """Per-position convex mixture of one kernel applied at several dilations.

    The mixture weights come from Gumbel-softmax over the hidden-prior
    logits. All candidate convolutions are padded to keep the input size.
    """
    dilations = [int(d) for d in dilations]
    if not dilations or min(dilations) < 1:
        raise ShapeError("dilation options must be positive integers")
    k = weight.shape[2]
    if weight.shape[3] != k or k % 2 == 0:
        raise ShapeError("adaptive dilation needs a square, odd-sized kernel")
    if prior_weight.shape[0] != len(dilations):
        raise ShapeError(f"prior produces {prior_weight.shape[0]} logits for {len(dilations)} dilations")
    logits = markov_hidden_prior(x, prior_weight, prior_bias, prior_prev, prior_prev_weight)
    probs = gumbel_softmax(logits, tau, noise, axis=1)
    if hard:
        onehot = (probs.data == probs.data.max(axis=1, keepdims=True)).astype(np.float64)
        onehot /= onehot.sum(axis=1, keepdims=True)
        probs = Tensor(onehot)
    out = None
    for i, d in enumerate(dilations):
        y = T.conv2d(x, weight, bias, 1, d * (k // 2), d)
        term = T.mul(probs[:, i : i + 1], y)
        out = term if out is None else T.add(out, term)
    if return_aux:
        return out, probs, logits
    return out


class AdaptiveDilatedConv2d(Module):
    def __init__(self, cin, cout, k=3, dilations=(1, 2, 3, 4), recurrent=False, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dilations = tuple(int(d) for d in dilations)
        if len(self.dilations) < 2:
            raise ShapeError("adaptive mode needs at least two dilation options")
        nd = len(self.dilations)
        self.weight = self.add_param("weight", _he(rng, (cout, cin, k, k), cin * k * k))
        self.bias = self.add_param("bias", np.zeros(cout))
        self.prior_weight = self.add_param("prior_weight", rng.normal(0.0, 0.1, size=(nd, cin, 1, 1)))
        self.prior_bias = self.add_param("prior_bias", np.zeros(nd))
        self.prev_weight = self.add_param("prev_weight", np.eye(nd).reshape(nd, nd, 1, 1) * 0.5) if recurrent else None
        self.tau = 1.0
        self.hard_inference = False
        self.last_probs: Optional[Tensor] = None
        self.last_logits: Optional[Tensor] = None

    def forward(self, x, rng: Optional[np.random.Generator] = None, prev_logits=None):
        noise = None
        if self.training and rng is not None:
            noise = gumbel_noise(rng, (x.shape[0], len(self.dilations)) + x.shape[2:])
        out, probs, logits = adaptive_dilated_conv(
            x, self.weight, self.bias, self.dilations, self.prior_weight, self.prior_bias, self.tau, noise,
            hard=self.hard_inference and not self.training,
            prior_prev=prev_logits, prior_prev_weight=self.prev_weight, return_aux=True,
        )
        self.last_probs, self.last_logits = probs, logits
        return out
