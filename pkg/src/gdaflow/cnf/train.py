"""Joint flow training over every domain of a sequence.

The objective sums, over time indices ``j``, the mean negative log-likelihood of the
``j``-th domain plus ``gamma`` times its trajectory penalty. Each optimizer step uses one
minibatch of one domain; domains are visited round-robin so all of them contribute to
every epoch.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from ..config import FlowConfig
from ..diffmath.optim import init_optimizer, optimizer_step
from ..diffmath.tensor import Tensor, stack
from ..errors import FlowDivergedError, GdaFlowError
from ..observability import operation_logger
from ..utils import rng_for
from .flow import FlowModel, FlowWeights, init_flow, integrate, standard_normal_logpdf
from .regularizer import draw_taus, line_fit_penalty, validate_taus

if TYPE_CHECKING:
    from ..data import DomainSequence

logger = logging.getLogger(__name__)

_DIVERGENCE_CODES = frozenset({"TRANSPORT_FAILED", "NON_FINITE_GRADIENT", "NON_FINITE"})


@dataclass(frozen=True)
class FlowEpochRecord:
    epoch: int
    time_index: float
    nll: float
    penalty: float
    total: float  # L_all of the epoch, repeated on each of its rows


@dataclass
class FlowHistory:
    gamma: float
    records: list[FlowEpochRecord] = field(default_factory=list)

    def epoch_totals(self) -> list[float]:
        totals: dict[int, float] = {}
        for record in self.records:
            totals[record.epoch] = record.total
        return [totals[e] for e in sorted(totals)]


def domain_objective(
    weights: FlowWeights, x: np.ndarray, j: float, taus: np.ndarray
) -> tuple[Tensor, Tensor]:
    """Mean NLL and trajectory penalty of one batch from a single x to z integration."""

    stops = tuple(float(t) for t in taus)
    z, delta, recorded = integrate(weights, Tensor(x), j, 0.0, stops=stops)
    assert delta is not None
    nll = -(standard_normal_logpdf(z) + delta).mean()
    penalty = line_fit_penalty(taus, stack([recorded[t] for t in stops], axis=0))
    return nll, penalty


def joint_loss(
    flow: FlowModel,
    batches: Mapping[float, np.ndarray],
    taus: Mapping[float, Sequence[float]],
    gamma: float,
    theta: Tensor | None = None,
) -> Tensor:
    """``sum_j (L0_j + gamma * P_j)`` over the given per-domain batches."""

    weights = FlowWeights(flow, theta)
    total: Tensor | None = None
    for j, x in batches.items():
        nll, penalty = domain_objective(weights, np.asarray(x, float), j, validate_taus(taus[j], j))
        term = nll + gamma * penalty
        total = term if total is None else total + term
    if total is None:
        raise GdaFlowError("joint_loss needs at least one domain batch", code="INVALID_INPUT")
    return total


def _domain_features(domains: DomainSequence | Mapping[float, np.ndarray]) -> list[tuple[float, np.ndarray]]:
    if isinstance(domains, Mapping):
        items = sorted((float(t), np.asarray(x, float)) for t, x in domains.items())
    else:
        items = list(domains.feature_domains())
    if not items:
        raise GdaFlowError("flow training needs at least one domain", code="INVALID_INPUT")
    for t, x in items:
        if x.ndim != 2 or x.shape[0] < 1:
            raise GdaFlowError(
                "every domain needs at least one sample",
                code="INVALID_INPUT",
                context={"time_index": t},
            )
    return items


def train_flow(
    domains: DomainSequence | Mapping[float, np.ndarray],
    gamma: float | None = None,
    m: int | None = None,
    config: FlowConfig | None = None,
) -> FlowModel:
    """Fit a flow to all domains jointly; the returned model carries its ``history``."""

    config = config or FlowConfig()
    gamma = config.gamma if gamma is None else float(gamma)
    m = config.m if m is None else int(m)
    if gamma < 0 or not math.isfinite(gamma):
        raise GdaFlowError("gamma must be >= 0", code="INVALID_INPUT", context={"gamma": gamma})
    if m < 2:
        raise GdaFlowError("m must be >= 2", code="INVALID_INPUT", context={"m": m})

    data = _domain_features(domains)
    times = [t for t, _ in data]
    dim = data[0][1].shape[1]
    horizon = max(times[-1], 1.0)
    flow = init_flow(
        dim, horizon, config, rng_for(config.seed, "flow", "init"), time_indices=times
    )
    flow = flow.with_params(flow.params, gamma=gamma, m=m)
    params = flow.params
    state = init_optimizer(params, lr=config.lr, weight_decay=config.weight_decay)
    batch_rng = rng_for(config.seed, "flow", "batches")
    tau_rng = rng_for(config.seed, "flow", "taus")
    history = FlowHistory(gamma=gamma)
    rounds = max(math.ceil(x.shape[0] / config.batch_size) for _, x in data)

    with operation_logger(
        "train_flow", domains=len(data), K=horizon, gamma=gamma, m=m, epochs=config.epochs
    ) as op:
        for epoch in range(config.epochs):
            perms = [batch_rng.permutation(x.shape[0]) for _, x in data]
            sums = np.zeros((len(data), 2))
            counts = np.zeros(len(data))
            for step in range(rounds * len(data)):
                d = step % len(data)
                j, x = data[d]
                size = min(config.batch_size, x.shape[0])
                start = (step // len(data)) * size
                idx = np.take(perms[d], np.arange(start, start + size), mode="wrap")
                taus = draw_taus(j, m, tau_rng)
                context = {"epoch": epoch, "step": step, "time_index": j}
                try:
                    theta = params.tensor(requires_grad=True)
                    nll, penalty = domain_objective(
                        FlowWeights(flow.with_params(params), theta), x[idx], j, taus
                    )
                    loss = nll + gamma * penalty if gamma > 0 else nll
                    if not math.isfinite(loss.item()):
                        raise GdaFlowError("non-finite loss", code="NON_FINITE", context=context)
                    loss.backward()
                    params, state = optimizer_step(params, theta.grad, state)
                except GdaFlowError as exc:
                    if exc.code not in _DIVERGENCE_CODES:
                        raise
                    op.update_context(**context)
                    raise FlowDivergedError(
                        f"flow training diverged: {exc}", history=history, context=context
                    ) from exc
                sums[d] += (nll.item(), penalty.item())
                counts[d] += 1

            means = sums / counts[:, None]
            total = float(np.sum(means[:, 0] + gamma * means[:, 1]))
            for d, (j, _) in enumerate(data):
                history.records.append(
                    FlowEpochRecord(epoch, j, float(means[d, 0]), float(means[d, 1]), total)
                )
            logger.debug(
                "flow_epoch",
                extra={"event": "flow_epoch", "epoch": epoch, "l_all": total},
            )
        op.success({"final_l_all": history.epoch_totals()[-1]})

    return flow.with_params(params, history=history)


__all__ = [
    "FlowEpochRecord",
    "FlowHistory",
    "domain_objective",
    "joint_loss",
    "train_flow",
]
