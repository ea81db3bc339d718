from __future__ import annotations

import logging
from collections.abc import Callable, Iterable
from dataclasses import dataclass

import numpy as np

from ..errors import GdaFlowError
from .mlp import ParamVector
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class GradCheckResult:
    """Outcome of comparing reverse-mode gradients with central differences.

    ``max_rel_error`` is taken over checked coordinates that are neither non-finite
    nor sitting on a kink (one-sided slopes disagree).
    """

    max_rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray
    coordinates: tuple[int, ...]
    nonfinite: tuple[int, ...] = ()
    kinks: tuple[int, ...] = ()


def analytic_gradient(f: Callable[[Tensor], Tensor], values: np.ndarray) -> tuple[float, np.ndarray]:
    theta = Tensor(np.array(values, dtype=np.float64), requires_grad=True)
    loss = f(theta)
    loss.backward()
    grad = theta.grad if theta.grad is not None else np.zeros_like(theta.data)
    return loss.item(), grad


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    params: ParamVector | np.ndarray,
    eps: float = 1e-5,
    *,
    coordinates: Iterable[int] | None = None,
    kink_tol: float = 1e-2,
) -> GradCheckResult:
    """Compare ``f``'s reverse-mode gradient at ``params`` with central differences.

    Relative error per coordinate is ``|analytic - central| / max(1, |analytic|)``.
    """

    if not eps > 0:
        raise GdaFlowError("eps must be > 0", code="INVALID_INPUT", context={"eps": eps})
    values = params.values if isinstance(params, ParamVector) else np.asarray(params, float)
    base, grad = analytic_gradient(f, values)
    coords = tuple(range(values.size)) if coordinates is None else tuple(coordinates)

    numeric = np.full(len(coords), np.nan)
    rel = np.zeros(len(coords))
    nonfinite: list[int] = []
    kinks: list[int] = []
    for pos, i in enumerate(coords):
        plus = values.copy()
        minus = values.copy()
        plus[i] += eps
        minus[i] -= eps
        f_plus = f(Tensor(plus)).item()
        f_minus = f(Tensor(minus)).item()
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            nonfinite.append(i)
            continue
        central = (f_plus - f_minus) / (2.0 * eps)
        numeric[pos] = central
        forward = (f_plus - base) / eps
        backward = (base - f_minus) / eps
        if abs(forward - backward) > kink_tol * max(1.0, abs(central)):
            kinks.append(i)
            continue
        rel[pos] = abs(grad[i] - central) / max(1.0, abs(grad[i]))

    if nonfinite:
        logger.warning(
            "gradcheck_nonfinite",
            extra={"event": "gradcheck_nonfinite", "coordinates": nonfinite[:20]},
        )
    return GradCheckResult(
        max_rel_error=float(rel.max()) if rel.size else 0.0,
        analytic=grad[list(coords)],
        numeric=numeric,
        coordinates=coords,
        nonfinite=tuple(nonfinite),
        kinks=tuple(kinks),
    )


__all__ = ["GradCheckResult", "analytic_gradient", "finite_diff_check"]
