"""Numpy reverse-mode autograd and the fusion network blocks."""

from .tensor import Tensor, no_grad

__all__ = ["Tensor", "no_grad"]
