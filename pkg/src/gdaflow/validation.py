"""Input validation utilities shared by the numerical modules."""

from __future__ import annotations

import math
from typing import Any

import numpy as np

from .errors import GdaFlowError


def as_matrix(name: str, value: Any, *, dim: int | None = None) -> np.ndarray:
    """Return ``value`` as a finite float64 ``(n, D)`` matrix or raise."""

    array = np.asarray(value, dtype=np.float64)
    if array.ndim == 1 and dim is not None and array.shape[0] == dim:
        array = array[None, :]
    if array.ndim != 2:
        raise GdaFlowError(
            f"{name} must be a 2-D matrix",
            code="SHAPE_MISMATCH",
            context={"field": name, "shape": list(array.shape)},
        )
    if dim is not None and array.shape[1] != dim:
        raise GdaFlowError(
            f"{name} has {array.shape[1]} columns, expected {dim}",
            code="SHAPE_MISMATCH",
            context={"field": name, "expected": dim, "got": array.shape[1]},
        )
    require_finite(name, array)
    return array


def require_finite(name: str, array: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(array)):
        bad = np.argwhere(~np.isfinite(array))
        raise GdaFlowError(
            f"{name} contains non-finite values",
            code="NON_FINITE",
            context={"field": name, "first_index": bad[0].tolist(), "count": int(len(bad))},
        )
    return array


def require_positive(name: str, value: float) -> float:
    if not math.isfinite(value) or value <= 0:
        raise GdaFlowError(
            f"{name} must be > 0",
            code="INVALID_INPUT",
            context={"field": name, "value": value},
        )
    return value


def validate_alpha(value: float, horizon: float | None = None) -> float:
    require_positive("alpha", value)
    if horizon is not None and value > horizon - 1 + 1e-9:
        raise GdaFlowError(
            "alpha must not exceed K - 1",
            code="INVALID_INPUT",
            context={"field": "alpha", "value": value, "K": horizon},
        )
    return float(value)
