"""Seeded finite-difference gradient cases, one per differentiable layer.

Each case returns the max relative error against central differences and
carries its tolerance (tighter for ops that are linear in every input).
"""

from __future__ import annotations

import dataclasses
from typing import Callable, List, NamedTuple

import numpy as np

from bevfuse.nn import tensor as T
from bevfuse.nn.bev import PolarHead, image_to_polar_bev
from bevfuse.nn.gradcheck import grad_check, grad_check_tensors
from bevfuse.nn.layers import adaptive_dilated_conv, gumbel_noise, gumbel_softmax, markov_hidden_prior
from bevfuse.nn.losses import cce_loss, mse_loss
from bevfuse.nn.model import NetworkConfig, OccupancyDecoder
from bevfuse.nn.tensor import Tensor

LINEAR_TOL = 1e-6
NONLINEAR_TOL = 1e-5


class GradCase(NamedTuple):
    name: str
    run: Callable[[], float]
    tol: float


def _conv2d() -> float:
    a = grad_check(lambda x, w, b: T.conv2d(x, w, b, 1, 1, 1), [(1, 2, 6, 6), (3, 2, 3, 3), (3,)], seed=1)
    b = grad_check(lambda x, w, b: T.conv2d(x, w, b, 2, 2, 2), [(1, 2, 6, 6), (2, 2, 3, 3), (2,)], seed=2)
    return max(a, b)


def _conv_transpose() -> float:
    a = grad_check(lambda x, w, b: T.conv_transpose2d(x, w, b, 2, 1), [(1, 2, 4, 4), (2, 3, 4, 4), (3,)], seed=3)
    b = grad_check(lambda x, w, b: T.conv_transpose2d(x, w, b, 2, 0), [(1, 2, 3, 3), (2, 2, 2, 2), (2,)], seed=4)
    return max(a, b)


def _batch_norm() -> float:
    c = 3
    rm, rv = np.zeros(c), np.ones(c)
    train = grad_check(lambda x, g, b: T.batch_norm(x, g, b, rm, rv, True), [(2, c, 4, 4), (c,), (c,)], seed=5)
    rm2, rv2 = np.array([0.1, -0.2, 0.3]), np.array([0.5, 1.5, 2.0])
    infer = grad_check(lambda x, g, b: T.batch_norm(x, g, b, rm2, rv2, False), [(2, c, 4, 4), (c,), (c,)], seed=6)
    return max(train, infer)


def _adaptive(recurrent: bool) -> float:
    rng = np.random.default_rng(7)
    dil = (1, 2, 3, 4)
    noise = gumbel_noise(rng, (1, len(dil), 8, 8))
    shapes = [(1, 2, 8, 8), (2, 2, 3, 3), (2,), (4, 2, 1, 1), (4,)]
    if recurrent:
        shapes += [(1, 4, 8, 8), (4, 4, 1, 1)]

    def op(x, w, b, pw, pb, *prev):
        extra = dict(prior_prev=prev[0], prior_prev_weight=prev[1]) if prev else {}
        return adaptive_dilated_conv(x, w, b, dil, pw, pb, 0.7, noise, **extra)

    return grad_check(op, shapes, seed=8)


def _gumbel_and_prior() -> float:
    noise = gumbel_noise(np.random.default_rng(9), (1, 4, 5, 5))
    a = grad_check(lambda z: gumbel_softmax(z, 0.5, noise), [(1, 4, 5, 5)], seed=10)
    b = grad_check(lambda x, w, b: markov_hidden_prior(x, w, b), [(1, 3, 5, 5), (4, 3, 1, 1), (4,)], seed=11)
    return max(a, b)


def _polar_head() -> float:
    a = grad_check(lambda x, w, b: image_to_polar_bev(x, w, b, 3), [(2, 2, 5, 4), (10, 6), (6,)], seed=12)
    head = PolarHead(2, 5, 2, 3, np.random.default_rng(13))
    x = Tensor(np.random.default_rng(14).standard_normal((1, 2, 5, 4)), requires_grad=True)
    b = grad_check_tensors(lambda: head(x), [x] + head.parameters(), seed=15)
    return max(a, b)


def tiny_decoder_config() -> NetworkConfig:
    return dataclasses.replace(NetworkConfig.fidelity(), decoder_growth=4, decoder_up_channels=4, decoder_head_hidden=4)


def _decoder() -> float:
    # Seed chosen so no ReLU pre-activation sits within the finite-difference step of its kink.
    dec = OccupancyDecoder(tiny_decoder_config(), 16, np.random.default_rng(31))
    x = Tensor(np.random.default_rng(131).standard_normal((1, 16, 4, 4)), requires_grad=True)
    return grad_check_tensors(lambda: dec(x), [x] + dec.parameters(), seed=31)


def _cce() -> float:
    rng = np.random.default_rng(20)
    labels = rng.integers(0, 2, size=(2, 4, 4))
    target = np.stack([labels == 0, labels == 1], axis=1).astype(float)
    return grad_check(lambda z: cce_loss(z, target), [(2, 2, 4, 4)], seed=21)


def _mse() -> float:
    target = np.random.default_rng(22).standard_normal((2, 1, 4, 4))
    return grad_check(lambda p: mse_loss(p, target), [(2, 1, 4, 4)], seed=23)


CASES: List[GradCase] = [
    GradCase("conv2d", _conv2d, LINEAR_TOL),
    GradCase("conv_transpose2d", _conv_transpose, LINEAR_TOL),
    GradCase("batch_norm", _batch_norm, NONLINEAR_TOL),
    GradCase("adaptive_dilated_conv", lambda: _adaptive(False), NONLINEAR_TOL),
    GradCase("adaptive_dilated_conv_recurrent", lambda: _adaptive(True), NONLINEAR_TOL),
    GradCase("gumbel_softmax_and_prior", _gumbel_and_prior, NONLINEAR_TOL),
    GradCase("polar_head", _polar_head, LINEAR_TOL),
    GradCase("decoder", _decoder, NONLINEAR_TOL),
    GradCase("cce_loss", _cce, NONLINEAR_TOL),
    GradCase("mse_loss", _mse, NONLINEAR_TOL),
]
