"""Adaptive-moment optimizer with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import GdaFlowError
from .mlp import ParamVector


@dataclass(frozen=True, eq=False)
class OptimState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    # 1.0 where a coordinate is optimized; non-trainable slots (running statistics) are 0
    mask: np.ndarray | None = field(default=None, repr=False)


def init_optimizer(
    params: ParamVector,
    *,
    lr: float = 1e-3,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> OptimState:
    size = len(params)
    return OptimState(
        first_moment=np.zeros(size),
        second_moment=np.zeros(size),
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        weight_decay=weight_decay,
        mask=params.layout.trainable_mask(),
    )


def optimizer_step(
    params: ParamVector, grads: np.ndarray, state: OptimState
) -> tuple[ParamVector, OptimState]:
    """One AdamW update; returns new parameters and state, inputs are left untouched."""

    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.values.shape or state.first_moment.shape != grads.shape:
        raise GdaFlowError(
            "gradient shape does not match parameters",
            code="SHAPE_MISMATCH",
            context={"params": list(params.values.shape), "grads": list(grads.shape)},
        )
    if not np.all(np.isfinite(grads)):
        bad = np.flatnonzero(~np.isfinite(grads))
        raise GdaFlowError(
            "non-finite gradient; step rejected",
            code="NON_FINITE_GRADIENT",
            context={"first_index": int(bad[0]), "count": int(bad.size)},
        )

    mask = state.mask if state.mask is not None else np.ones_like(grads)
    grads = grads * mask
    step = state.step + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)

    values = params.values * (1.0 - state.lr * state.weight_decay * mask)
    values = values - state.lr * mask * m_hat / (np.sqrt(v_hat) + state.eps)
    return params.with_values(values), replace(state, first_moment=m, second_moment=v, step=step)


__all__ = ["OptimState", "init_optimizer", "optimizer_step"]
