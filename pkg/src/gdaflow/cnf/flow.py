"""Velocity field over domain-time and fixed-step transport with log-density tracking.

The flow moves a state ``g`` along ``dg/dt = v(g, t)`` for ``t`` in ``[0, K]``. Time 0 is
the standard-normal base space and time ``j`` is the ``j``-th domain. Transport uses
classic RK4 on a fixed grid and integrates ``d(delta)/dt = Tr(dv/dg)`` alongside the
state, so that ``log p_{t_from}(start) = log p_{t_to}(end) + delta``.

With ``block_count > 1`` the time axis is split evenly into blocks. Each block owns a
velocity network, and an invertible per-dimension affine map sits at every internal
boundary. The state at a boundary time is the pre-affine (lower block) value.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np

from ..diffmath.mlp import (
    DenseWeights,
    MlpSpec,
    ParamLayout,
    ParamSlot,
    ParamVector,
    dense_forward,
    init_params,
    mlp_jvp,
    mlp_layout,
    unpack,
)
from ..diffmath.tensor import Tensor, concat, exp
from ..errors import GdaFlowError, TransportError
from ..validation import as_matrix

if TYPE_CHECKING:
    from ..config import FlowConfig
    from .train import FlowHistory

logger = logging.getLogger(__name__)

MAX_DIM = 32
TIME_TOL = 1e-9
_LOG_2PI = math.log(2.0 * math.pi)


def _affine_layout(dim: int) -> ParamLayout:
    return ParamLayout(
        (
            ParamSlot("affine", "log_scale", (dim,), 0),
            ParamSlot("affine", "shift", (dim,), dim),
        )
    )


def flow_layout(spec: MlpSpec, block_count: int) -> ParamLayout:
    """Velocity networks ``block{b}.dense{i}`` first, then ``boundary{b}.affine`` maps."""

    dim = spec.output_dim
    parts: list[tuple[str, ParamLayout]] = [
        (f"block{b}.", mlp_layout(spec)) for b in range(block_count)
    ]
    parts.extend((f"boundary{b}.", _affine_layout(dim)) for b in range(1, block_count))
    return ParamLayout.join(*parts)


@dataclass(frozen=True, eq=False)
class FlowModel:
    """Immutable trained (or initialised) flow; safe to share between threads."""

    dim: int
    horizon: float
    velocity_spec: MlpSpec
    params: ParamVector
    steps_per_unit_time: int = 16
    block_count: int = 1
    gamma: float = 5.0
    m: int = 4
    time_indices: tuple[float, ...] = ()
    history: FlowHistory | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if not 1 <= self.dim <= MAX_DIM:
            raise GdaFlowError(
                f"flow dimension must be in [1, {MAX_DIM}] for the exact trace",
                code="INVALID_INPUT",
                context={"dim": self.dim},
            )
        if not (math.isfinite(self.horizon) and self.horizon >= 1.0):
            raise GdaFlowError(
                "horizon K must be >= 1", code="INVALID_INPUT", context={"K": self.horizon}
            )
        if self.steps_per_unit_time < 1 or self.block_count < 1:
            raise GdaFlowError(
                "steps_per_unit_time and block_count must be positive",
                code="INVALID_INPUT",
                context={
                    "steps_per_unit_time": self.steps_per_unit_time,
                    "block_count": self.block_count,
                },
            )
        spec = self.velocity_spec
        if spec.input_dim != self.dim + 1 or spec.output_dim != self.dim:
            raise GdaFlowError(
                "velocity network must map D+1 inputs (state, time) to D outputs",
                code="SHAPE_MISMATCH",
                context={"dim": self.dim, "input": spec.input_dim, "output": spec.output_dim},
            )
        if spec.batch_norm or spec.dropout > 0:
            raise GdaFlowError(
                "velocity network must be a plain dense network", code="INVALID_INPUT"
            )
        expected = flow_layout(spec, self.block_count)
        if self.params.layout != expected:
            raise GdaFlowError(
                "flow parameters do not match the velocity network layout",
                code="SHAPE_MISMATCH",
                context={"expected": expected.size, "got": self.params.layout.size},
            )

    @property
    def block_edges(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.block_count + 1)

    @property
    def internal_boundaries(self) -> tuple[float, ...]:
        return tuple(float(s) for s in self.block_edges[1:-1])

    def block_of(self, t_mid: float) -> int:
        width = self.horizon / self.block_count
        return min(self.block_count - 1, max(0, int(t_mid // width)))

    def with_params(self, params: ParamVector, **changes: Any) -> FlowModel:
        fields = {
            "dim": self.dim,
            "horizon": self.horizon,
            "velocity_spec": self.velocity_spec,
            "params": params,
            "steps_per_unit_time": self.steps_per_unit_time,
            "block_count": self.block_count,
            "gamma": self.gamma,
            "m": self.m,
            "time_indices": self.time_indices,
            "history": self.history,
        }
        fields.update(changes)
        return FlowModel(**fields)


def velocity_spec_for(dim: int, config: FlowConfig) -> MlpSpec:
    return MlpSpec.build(dim + 1, config.hidden, dim, activation=config.activation)


def init_flow(
    dim: int,
    horizon: float,
    config: FlowConfig,
    rng: np.random.Generator,
    *,
    time_indices: Sequence[float] = (),
) -> FlowModel:
    """Fresh flow: random velocity weights per block, identity affine maps at boundaries."""

    spec = velocity_spec_for(dim, config)
    layout = flow_layout(spec, config.block_count)
    values = np.zeros(layout.size)
    block_size = mlp_layout(spec).size
    for b in range(config.block_count):
        values[b * block_size : (b + 1) * block_size] = init_params(spec, rng).values
    # log_scale = 0 and shift = 0 at every boundary: identity maps
    return FlowModel(
        dim=dim,
        horizon=float(horizon),
        velocity_spec=spec,
        params=ParamVector(values, layout),
        steps_per_unit_time=config.steps_per_unit_time,
        block_count=config.block_count,
        gamma=config.gamma,
        m=config.m,
        time_indices=tuple(float(t) for t in time_indices),
    )


class FlowWeights:
    """The flow's flat parameters sliced into tensors for one objective evaluation."""

    def __init__(self, flow: FlowModel, theta: Tensor | None = None) -> None:
        self.flow = flow
        self.theta = theta if theta is not None else flow.params.tensor()
        spec = flow.velocity_spec
        block_size = mlp_layout(spec).size
        self.blocks: list[list[DenseWeights]] = [
            unpack(spec, self.theta, offset=b * block_size) for b in range(flow.block_count)
        ]
        layout = flow.params.layout
        self.log_scale: dict[int, Tensor] = {}
        self.shift: dict[int, Tensor] = {}
        for b in range(1, flow.block_count):
            ls = layout.slot(f"boundary{b}.affine", "log_scale")
            sh = layout.slot(f"boundary{b}.affine", "shift")
            self.log_scale[b] = self.theta[ls.start : ls.stop]
            self.shift[b] = self.theta[sh.start : sh.stop]

    def _inputs(self, g: Tensor, t: float | Tensor) -> Tensor:
        batch = g.shape[0]
        if isinstance(t, Tensor):
            column = Tensor(np.ones((batch, 1))) * t
        else:
            column = Tensor(np.full((batch, 1), float(t)))
        return concat([g, column], axis=1)

    def velocity(self, g: Tensor, t: float | Tensor, block: int = 0) -> Tensor:
        spec = self.flow.velocity_spec
        return dense_forward(spec, self.blocks[block], self._inputs(g, t))

    def velocity_and_trace(self, g: Tensor, t: float, block: int = 0) -> tuple[Tensor, Tensor]:
        """Velocity ``(B, D)`` and exact ``Tr(dv/dg)`` ``(B,)`` from D tangent directions."""

        spec = self.flow.velocity_spec
        v, jac = mlp_jvp(spec, self.blocks[block], self._inputs(g, t), self.flow.dim)
        trace = (jac * np.eye(self.flow.dim)).sum(axis=(1, 2))
        return v, trace

    def cross_boundary(
        self, g: Tensor, delta: Tensor | None, boundary: int, upward: bool
    ) -> tuple[Tensor, Tensor | None]:
        log_scale = self.log_scale[boundary]
        shift = self.shift[boundary]
        if upward:
            g = g * exp(log_scale) + shift
            if delta is not None:
                delta = delta + log_scale.sum()
        else:
            g = (g - shift) * exp(-log_scale)
            if delta is not None:
                delta = delta - log_scale.sum()
        return g, delta


@dataclass(frozen=True, eq=False)
class TransportResult:
    endpoint: np.ndarray
    delta_logdensity: np.ndarray
    trajectory: tuple[tuple[float, np.ndarray], ...] | None = None


def _check_time(flow: FlowModel, name: str, t: float) -> float:
    t = float(t)
    if not (math.isfinite(t) and -TIME_TOL <= t <= flow.horizon + TIME_TOL):
        raise GdaFlowError(
            f"{name} must lie in [0, K]",
            code="INVALID_INPUT",
            context={"field": name, "value": t, "K": flow.horizon},
        )
    return min(max(t, 0.0), flow.horizon)


def _breakpoints(
    flow: FlowModel, t_from: float, t_to: float, stops: Sequence[float]
) -> list[float]:
    lo, hi = min(t_from, t_to), max(t_from, t_to)
    points = {t_from, t_to}
    points.update(s for s in flow.internal_boundaries if lo + TIME_TOL < s < hi - TIME_TOL)
    points.update(s for s in stops if lo - TIME_TOL <= s <= hi + TIME_TOL)
    ordered = sorted(points, reverse=t_from > t_to)
    merged: list[float] = []
    for p in ordered:
        if not merged or abs(p - merged[-1]) > TIME_TOL:
            merged.append(p)
    return merged


def step_count(flow: FlowModel, span: float) -> int:
    return max(1, math.ceil(abs(span) * flow.steps_per_unit_time - 1e-9))


def _rk4(
    weights: FlowWeights,
    g: Tensor,
    delta: Tensor | None,
    t: float,
    h: float,
    block: int,
) -> tuple[Tensor, Tensor | None]:
    if delta is None:

        def f(state: Tensor, time: float) -> tuple[Tensor, Tensor | None]:
            return weights.velocity(state, time, block), None

    else:

        def f(state: Tensor, time: float) -> tuple[Tensor, Tensor | None]:
            return weights.velocity_and_trace(state, time, block)

    v1, c1 = f(g, t)
    v2, c2 = f(g + (0.5 * h) * v1, t + 0.5 * h)
    v3, c3 = f(g + (0.5 * h) * v2, t + 0.5 * h)
    v4, c4 = f(g + h * v3, t + h)
    g_next = g + (h / 6.0) * (v1 + 2.0 * v2 + 2.0 * v3 + v4)
    if delta is not None:
        delta = delta + (h / 6.0) * (c1 + 2.0 * c2 + 2.0 * c3 + c4)
    return g_next, delta


def integrate(
    weights: FlowWeights,
    g: Tensor,
    t_from: float,
    t_to: float,
    *,
    logdensity: bool = True,
    stops: Sequence[float] = (),
) -> tuple[Tensor, Tensor | None, dict[float, Tensor]]:
    """Differentiable transport of a batch ``g`` from ``t_from`` to ``t_to``.

    Returns the endpoint, the accumulated ``delta`` (or None) and the states at each
    requested stop time, keyed by the stop value as given.
    """

    flow = weights.flow
    points = _breakpoints(flow, t_from, t_to, stops)
    upward = t_to > t_from
    delta: Tensor | None = Tensor(np.zeros(g.shape[0])) if logdensity else None
    recorded: dict[float, Tensor] = {}

    def record(time: float, state: Tensor) -> None:
        for s in stops:
            if abs(s - time) <= TIME_TOL and s not in recorded:
                recorded[s] = state

    record(points[0], g)
    step_index = 0
    for a, b in zip(points[:-1], points[1:], strict=False):
        boundary = _boundary_at(flow, a)
        if boundary is not None and upward:
            g, delta = weights.cross_boundary(g, delta, boundary, upward=True)
        n = step_count(flow, b - a)
        h = (b - a) / n
        block = flow.block_of(0.5 * (a + b))
        for i in range(n):
            t = a + i * h
            g, delta = _rk4(weights, g, delta, t, h, block)
            step_index += 1
            if not np.all(np.isfinite(g.data)) or (
                delta is not None and not np.all(np.isfinite(delta.data))
            ):
                raise TransportError(
                    "non-finite state during transport",
                    step_index=step_index,
                    time=t + h,
                )
        boundary = _boundary_at(flow, b)
        if boundary is not None and not upward:
            g, delta = weights.cross_boundary(g, delta, boundary, upward=False)
        record(b, g)
    return g, delta, recorded


def _boundary_at(flow: FlowModel, t: float) -> int | None:
    for index, s in enumerate(flow.internal_boundaries, start=1):
        if abs(s - t) <= TIME_TOL:
            return index
    return None


def _batch(flow: FlowModel, name: str, x: Any) -> tuple[np.ndarray, bool]:
    array = np.asarray(x, dtype=np.float64)
    single = array.ndim == 1
    return as_matrix(name, array, dim=flow.dim), single


def velocity(flow: FlowModel, g: Any, t: float) -> np.ndarray:
    """``dg/dt`` at ``(g, t)``; accepts one state ``(D,)`` or a batch ``(B, D)``."""

    states, single = _batch(flow, "g", g)
    t = _check_time(flow, "t", t)
    weights = FlowWeights(flow)
    v = weights.velocity(Tensor(states), t, flow.block_of(t)).data
    return v[0] if single else v


def jacobian_trace(flow: FlowModel, g: Any, t: float) -> np.ndarray | float:
    states, single = _batch(flow, "g", g)
    t = _check_time(flow, "t", t)
    weights = FlowWeights(flow)
    _, trace = weights.velocity_and_trace(Tensor(states), t, flow.block_of(t))
    return float(trace.data[0]) if single else trace.data


def transport(
    flow: FlowModel,
    start_state: Any,
    t_from: float,
    t_to: float,
    *,
    record_trajectory: bool = False,
    logdensity: bool = True,
) -> TransportResult:
    """Move states from ``t_from`` to ``t_to``; ``t_from > t_to`` is the x to z direction."""

    states, single = _batch(flow, "start_state", start_state)
    t_from = _check_time(flow, "t_from", t_from)
    t_to = _check_time(flow, "t_to", t_to)
    weights = FlowWeights(flow)
    stops: tuple[float, ...] = ()
    if record_trajectory:
        span = t_to - t_from
        n = step_count(flow, span)
        stops = tuple(t_from + span * i / n for i in range(n + 1))
    end, delta, recorded = integrate(
        weights, Tensor(states), t_from, t_to, logdensity=logdensity, stops=stops
    )
    delta_values = delta.data if delta is not None else np.zeros(states.shape[0])
    trajectory = None
    if record_trajectory:
        trajectory = tuple(
            (s, recorded[s].data[0] if single else recorded[s].data) for s in stops if s in recorded
        )
    if single:
        return TransportResult(end.data[0], delta_values[0], trajectory)
    return TransportResult(end.data, delta_values, trajectory)


def standard_normal_logpdf(z: np.ndarray | Tensor) -> Any:
    """Row-wise log N(z; 0, I); differentiable when given a Tensor."""

    dim = z.shape[-1]
    return -0.5 * (z * z).sum(axis=-1) - 0.5 * dim * _LOG_2PI


def log_likelihood(flow: FlowModel, x: Any, j: float) -> np.ndarray | float:
    """``log p_j(x) = log N(z) + delta`` with ``z`` the x to z transport endpoint."""

    j = _check_time(flow, "j", j)
    if j <= 0.0:
        raise GdaFlowError("j must be > 0", code="INVALID_INPUT", context={"j": j})
    result = transport(flow, x, j, 0.0)
    value = standard_normal_logpdf(result.endpoint) + result.delta_logdensity
    return float(value) if np.ndim(value) == 0 else value


def negative_log_likelihood(weights: FlowWeights, x: np.ndarray, j: float) -> Tensor:
    """Mean NLL of a batch at time index ``j`` as a differentiable scalar."""

    z, delta, _ = integrate(weights, Tensor(x), j, 0.0)
    assert delta is not None
    return -(standard_normal_logpdf(z) + delta).mean()


def draw_base(n: int, dim: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((n, dim))


def push_forward(flow: FlowModel, z: Any, j: float) -> np.ndarray:
    """Images of base-space points ``z`` at time ``j`` (the z to x direction)."""

    return transport(flow, z, 0.0, j, logdensity=False).endpoint


def sample(flow: FlowModel, n: int, j: float, seed: int) -> np.ndarray:
    if n < 1:
        raise GdaFlowError("n must be >= 1", code="INVALID_INPUT", context={"n": n})
    return np.atleast_2d(push_forward(flow, draw_base(n, flow.dim, seed), j))


__all__ = [
    "MAX_DIM",
    "FlowModel",
    "FlowWeights",
    "TransportResult",
    "draw_base",
    "flow_layout",
    "init_flow",
    "integrate",
    "jacobian_trace",
    "log_likelihood",
    "negative_log_likelihood",
    "push_forward",
    "sample",
    "standard_normal_logpdf",
    "step_count",
    "transport",
    "velocity",
    "velocity_spec_for",
]
