"""Minimal dense-tensor autodiff engine."""

from . import ops
from .tensor import GraphError, Tensor, as_tensor, backward, grad_enabled, no_grad

__all__ = ["GraphError", "Tensor", "as_tensor", "backward", "grad_enabled", "no_grad", "ops"]
