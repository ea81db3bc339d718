"""Trajectory straightness penalty.

Each sample's states at the times ``taus`` are fitted by a least-squares line in ``t``;
the penalty is the mean over time points of the summed residual norms.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np

from ..diffmath.tensor import Tensor, sqrt, stack
from ..errors import GdaFlowError
from .flow import TIME_TOL, FlowModel, FlowWeights, integrate

# keeps the norm differentiable at an exactly straight trajectory
_NORM_EPS = 1e-24


@dataclass(frozen=True, eq=False)
class RegularizerSample:
    taus: np.ndarray
    states: np.ndarray  # (m, B, D)
    slope: np.ndarray  # beta_1, (B, D)
    intercept: np.ndarray  # beta_0, (B, D)


def validate_taus(taus: Sequence[float], j: float) -> np.ndarray:
    values = np.asarray(taus, dtype=np.float64)
    if values.ndim != 1 or values.size < 2:
        raise GdaFlowError(
            "trajectory penalty needs m >= 2 time points",
            code="INVALID_INPUT",
            context={"m": int(values.size)},
        )
    if abs(values[0]) > TIME_TOL or abs(values[-1] - j) > TIME_TOL:
        raise GdaFlowError(
            "taus must start at 0 and end at j",
            code="INVALID_INPUT",
            context={"first": float(values[0]), "last": float(values[-1]), "j": j},
        )
    if np.any(np.diff(values) <= 0):
        raise GdaFlowError("taus must be strictly increasing", code="INVALID_INPUT")
    return values


def draw_taus(j: float, m: int, rng: np.random.Generator) -> np.ndarray:
    """``0``, ``m - 2`` sorted uniform interior times in ``(0, j)``, then ``j``."""

    interior = np.sort(rng.uniform(0.0, j, size=m - 2))
    return np.concatenate([[0.0], interior, [float(j)]])


def residual_operator(taus: np.ndarray) -> np.ndarray:
    """``I - A A^+`` for the design ``A = [tau, 1]``: maps points to line-fit residuals."""

    design = np.stack([taus, np.ones_like(taus)], axis=1)
    return np.eye(taus.size) - design @ np.linalg.pinv(design)


def line_fit_penalty(taus: Sequence[float], states: Any) -> Any:
    """Penalty for states ``(m, B, D)`` sampled at ``taus``; Tensor in, Tensor out."""

    taus = np.asarray(taus, dtype=np.float64)
    stacked = states if isinstance(states, Tensor) else Tensor(np.asarray(states, float))
    m = taus.size
    if stacked.ndim == 2:
        stacked = stacked.reshape(m, stacked.shape[1], 1)
    _, batch, dim = stacked.shape
    residuals = Tensor(residual_operator(taus)) @ stacked.reshape(m, batch * dim)
    squared = (residuals * residuals).reshape(m, batch, dim).sum(axis=2)
    penalty = sqrt(squared + _NORM_EPS).sum() / float(m)
    return penalty if isinstance(states, Tensor) else penalty.item()


def penalty_tensor(weights: FlowWeights, x: np.ndarray, j: float, taus: np.ndarray) -> Tensor:
    """Differentiable penalty for a batch ``x`` observed at time index ``j``."""

    stops = tuple(float(t) for t in taus)
    _, _, recorded = integrate(weights, Tensor(x), j, 0.0, logdensity=False, stops=stops)
    return line_fit_penalty(taus, stack([recorded[t] for t in stops], axis=0))


def trajectory_penalty(
    flow: FlowModel, batch: Any, j: float, taus: Sequence[float]
) -> float:
    taus = validate_taus(taus, j)
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    return penalty_tensor(FlowWeights(flow), x, j, taus).item()


def regularizer_sample(
    flow: FlowModel, batch: Any, j: float, taus: Sequence[float]
) -> RegularizerSample:
    """States along each trajectory with their fitted lines, for diagnostics."""

    taus = validate_taus(taus, j)
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    stops = tuple(float(t) for t in taus)
    _, _, recorded = integrate(FlowWeights(flow), Tensor(x), j, 0.0, logdensity=False, stops=stops)
    states = np.stack([recorded[t].data for t in stops], axis=0)
    design = np.stack([taus, np.ones_like(taus)], axis=1)
    coef = np.linalg.pinv(design) @ states.reshape(taus.size, -1)
    shape = states.shape[1:]
    return RegularizerSample(
        taus=taus,
        states=states,
        slope=coef[0].reshape(shape),
        intercept=coef[1].reshape(shape),
    )


__all__ = [
    "RegularizerSample",
    "draw_taus",
    "line_fit_penalty",
    "penalty_tensor",
    "regularizer_sample",
    "residual_operator",
    "trajectory_penalty",
    "validate_taus",
]
