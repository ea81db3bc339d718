"""Densified domain chains: time-index sets, pseudo-domains and the adaptation walk."""

from __future__ import annotations

import logging
import math
import threading
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .cnf.flow import FlowModel, draw_base, push_forward
from .config import RunConfig
from .data import DomainSequence, LabeledDataset, UnlabeledDataset, subsample
from .errors import GdaFlowError
from .evaluation import EXACT_W2_LIMIT, wasserstein2
from .observability import operation_logger
from .selftrain import ChainResult, Classifier, gradual_chain, train_source
from .utils import derive_seed

logger = logging.getLogger(__name__)

TIME_TOL = 1e-9
DatasetKind = Literal["real", "generated"]


@dataclass(frozen=True)
class TimeIndexSet:
    indices: tuple[float, ...]
    generated: tuple[bool, ...]

    def __iter__(self) -> Iterator[tuple[float, bool]]:
        return iter(zip(self.indices, self.generated, strict=True))

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def generated_indices(self) -> tuple[float, ...]:
        return tuple(t for t, g in zip(self.indices, self.generated, strict=True) if g)


def time_index_set(horizon: float, real_indices: Sequence[float], alpha: float) -> TimeIndexSet:
    """``{1 + alpha k : 1 <= k <= (K - 1) / alpha}`` merged with the real indices.

    Generated values within 1e-9 of a real index are dropped in favour of the real one.
    """

    if not (math.isfinite(alpha) and alpha > 0):
        raise GdaFlowError("alpha must be > 0", code="INVALID_INPUT", context={"alpha": alpha})
    real = sorted(float(t) for t in real_indices)
    if not real or abs(real[0] - 1.0) > TIME_TOL or abs(real[-1] - horizon) > TIME_TOL:
        raise GdaFlowError(
            "real indices must include 1 and K and lie within [1, K]",
            code="INVALID_INPUT",
            context={"K": horizon, "T": real},
        )
    k_max = math.floor((horizon - 1.0) / alpha + TIME_TOL)
    generated: list[float] = []
    for k in range(1, k_max + 1):
        value = 1.0 + alpha * k
        if value > horizon + TIME_TOL:
            break
        if any(abs(value - t) <= TIME_TOL for t in real):
            continue
        generated.append(value)
    merged = sorted([(t, False) for t in real] + [(t, True) for t in generated])
    return TimeIndexSet(tuple(t for t, _ in merged), tuple(g for _, g in merged))


@dataclass(frozen=True, eq=False)
class PseudoDomain:
    time_index: float
    samples: np.ndarray
    seed: int
    base_points: np.ndarray

    def as_unlabeled(self) -> UnlabeledDataset:
        return UnlabeledDataset(self.samples, self.time_index)


def generate_pseudo_domain(flow: FlowModel, j: float, n: int, seed: int) -> PseudoDomain:
    """``n`` standard-normal draws carried from time 0 to ``j``."""

    if not (0.0 < j <= flow.horizon + TIME_TOL):
        raise GdaFlowError(
            "pseudo-domain index must lie in (0, K]",
            code="INVALID_INPUT",
            context={"j": j, "K": flow.horizon},
        )
    if n < 1:
        raise GdaFlowError("n must be >= 1", code="INVALID_INPUT", context={"n": n})
    z = draw_base(n, flow.dim, seed)
    samples = np.atleast_2d(push_forward(flow, z, j))
    return PseudoDomain(time_index=float(j), samples=samples, seed=seed, base_points=z)


class PseudoDomainCache:
    """Generated domains keyed by ``(seed, j)`` so replays reuse identical samples."""

    def __init__(self) -> None:
        self._items: dict[tuple[int, float, int], PseudoDomain] = {}
        self._lock = threading.Lock()

    def get(self, flow: FlowModel, j: float, n: int, seed: int) -> PseudoDomain:
        key = (seed, round(j, 9), n)
        with self._lock:
            cached = self._items.get(key)
        if cached is not None:
            return cached
        domain = generate_pseudo_domain(flow, j, n, seed)
        with self._lock:
            return self._items.setdefault(key, domain)

    def __len__(self) -> int:
        return len(self._items)


@dataclass(frozen=True, eq=False)
class WalkStep:
    step_index: int
    time_index: float
    kind: DatasetKind
    dataset: UnlabeledDataset
    seed: int | None = None


@dataclass(frozen=True, eq=False)
class GdaRun:
    classifier: Classifier
    chain: ChainResult
    walk: tuple[WalkStep, ...]
    alpha: float
    n_generate: int

    def cycle_walk(self, mode: Literal["symmetric", "real"] = "symmetric") -> list[UnlabeledDataset]:
        steps = self.walk if mode == "symmetric" else [s for s in self.walk if s.kind == "real"]
        return [s.dataset for s in steps]


def build_walk(
    sequence: DomainSequence,
    flow: FlowModel | None,
    alpha: float,
    n_generate: int,
    seed: int,
    *,
    cache: PseudoDomainCache | None = None,
) -> tuple[WalkStep, ...]:
    indices = time_index_set(sequence.horizon, sequence.time_indices, alpha)
    if indices.generated_indices and flow is None:
        raise GdaFlowError(
            "a flow checkpoint is required to generate pseudo-domains",
            code="INVALID_INPUT",
            context={"alpha": alpha},
        )
    if cache is None:
        cache = PseudoDomainCache()
    steps: list[WalkStep] = []
    for i, (t, generated) in enumerate(indices):
        if generated:
            assert flow is not None
            pseudo_seed = derive_seed(seed, "pseudo", t)
            try:
                domain = cache.get(flow, t, n_generate, pseudo_seed)
            except GdaFlowError as exc:
                exc.context.setdefault("time_index", t)
                raise
            steps.append(WalkStep(i, t, "generated", domain.as_unlabeled(), pseudo_seed))
        else:
            dataset = sequence.unlabeled_at(t)
            assert dataset is not None
            steps.append(WalkStep(i, t, "real", dataset))
    return tuple(steps)


def _check_flow(flow: FlowModel, sequence: DomainSequence) -> None:
    if abs(flow.horizon - sequence.horizon) > TIME_TOL:
        raise GdaFlowError(
            "flow horizon K does not match the domain sequence",
            code="INVALID_INPUT",
            context={"flow_K": flow.horizon, "sequence_K": sequence.horizon},
        )
    trained_on = flow.time_indices
    if trained_on and (
        len(trained_on) != len(sequence.time_indices)
        or not np.allclose(trained_on, sequence.time_indices, rtol=0.0, atol=TIME_TOL)
    ):
        raise GdaFlowError(
            "flow was trained on a different set of time indices",
            code="INVALID_INPUT",
            context={"flow_T": list(flow.time_indices), "sequence_T": list(sequence.time_indices)},
        )
    if flow.dim != sequence.dim:
        raise GdaFlowError(
            "flow dimension does not match the domain features",
            code="SHAPE_MISMATCH",
            context={"flow_D": flow.dim, "sequence_D": sequence.dim},
        )


def run_gda(
    source: LabeledDataset,
    unlabeled: DomainSequence,
    flow: FlowModel | None,
    alpha: float,
    n_generate: int | None = None,
    config: RunConfig | None = None,
    *,
    cache: PseudoDomainCache | None = None,
) -> GdaRun:
    """Train on the source, then self-train along the densified walk up to the target."""

    config = config or RunConfig()
    sequence = unlabeled.training_view()
    if flow is not None:
        _check_flow(flow, sequence)
    n_generate = n_generate or config.n_generate or sequence.mean_size()
    with operation_logger("run_gda", alpha=alpha, K=sequence.horizon, n_generate=n_generate) as op:
        walk = build_walk(sequence, flow, alpha, n_generate, config.seed, cache=cache)
        theta1 = train_source(source, config.classifier, seed=config.seed)
        chain = gradual_chain(
            theta1, [step.dataset for step in walk[1:]], config.classifier, seed=config.seed
        )
        generated = sum(step.kind == "generated" for step in walk)
        op.success({"steps": len(walk), "generated": generated})
    return GdaRun(chain.final, chain, walk, float(alpha), int(n_generate))


def adjacent_distances(
    datasets: Sequence[UnlabeledDataset],
    seed: int,
    *,
    limit: int = EXACT_W2_LIMIT,
) -> list[tuple[float, float, float]]:
    """Exact W2 between consecutive datasets, each side subsampled to a common size."""

    out: list[tuple[float, float, float]] = []
    for k, (a, b) in enumerate(zip(datasets[:-1], datasets[1:], strict=False)):
        size = min(a.n, b.n, limit)
        xa = subsample(a.features, size, derive_seed(seed, "w2", k, "a"))
        xb = subsample(b.features, size, derive_seed(seed, "w2", k, "b"))
        out.append((a.time_index, b.time_index, wasserstein2(xa, xb)))
    return out


__all__ = [
    "GdaRun",
    "PseudoDomain",
    "PseudoDomainCache",
    "TimeIndexSet",
    "WalkStep",
    "adjacent_distances",
    "build_walk",
    "generate_pseudo_domain",
    "run_gda",
    "time_index_set",
]
