"""Differentiable computation core: tape autograd, dense networks, optimizer, gradient checks."""

import numpy as np

from .gradcheck import GradCheckResult, analytic_gradient, finite_diff_check
from .mlp import (
    LayerSpec,
    MlpSpec,
    ParamLayout,
    ParamSlot,
    ParamVector,
    init_params,
    mlp_forward,
    mlp_jvp,
    mlp_layout,
    unpack,
)
from .optim import OptimState, init_optimizer, optimizer_step
from .tensor import Tensor, softmax_cross_entropy


def backward(loss: Tensor, params: Tensor) -> np.ndarray:
    """Gradient of a scalar ``loss`` with respect to the flat parameter leaf ``params``."""

    params.zero_grad()
    loss.backward()
    return params.grad if params.grad is not None else np.zeros_like(params.data)


__all__ = [
    "GradCheckResult",
    "LayerSpec",
    "MlpSpec",
    "OptimState",
    "ParamLayout",
    "ParamSlot",
    "ParamVector",
    "Tensor",
    "analytic_gradient",
    "backward",
    "finite_diff_check",
    "init_optimizer",
    "init_params",
    "mlp_forward",
    "mlp_jvp",
    "mlp_layout",
    "optimizer_step",
    "softmax_cross_entropy",
    "unpack",
]
