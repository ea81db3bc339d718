"""Source training, hard pseudo-labels, self-training chains and cycle consistency.

Labels are ``1..C`` at this module's surface and ``0..C-1`` inside the loss.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Any, NamedTuple

import numpy as np
from scipy.special import softmax

from .config import ClassifierConfig, RunConfig
from .data import LabeledDataset, UnlabeledDataset
from .diffmath.mlp import MlpSpec, ParamVector, init_params, mlp_forward, mlp_layout
from .diffmath.optim import init_optimizer, optimizer_step
from .diffmath.tensor import Tensor, softmax_cross_entropy
from .errors import GdaFlowError
from .evaluation import accuracy, pearson
from .observability import operation_logger
from .utils import derive_seed, rng_for

if TYPE_CHECKING:
    from .cnf.flow import FlowModel
    from .data import DomainSequence

logger = logging.getLogger(__name__)

_BN_MOMENTUM = 0.1
ALPHA_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Classifier:
    """A probabilistic classifier h_theta; immutable."""

    spec: MlpSpec
    theta: ParamVector
    class_count: int
    train_accuracy: float | None = None
    warnings: tuple[str, ...] = field(default=(), repr=False)

    def __post_init__(self) -> None:
        if self.spec.output_dim != self.class_count:
            raise GdaFlowError(
                "classifier output dimension must equal the class count",
                code="SHAPE_MISMATCH",
                context={"output_dim": self.spec.output_dim, "class_count": self.class_count},
            )

    def logits(self, x: Any) -> np.ndarray:
        features = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return mlp_forward(self.spec, self.theta, features).data

    def predict_proba(self, x: Any) -> np.ndarray:
        return softmax(self.logits(x), axis=1)

    def predict(self, x: Any) -> np.ndarray:
        return argmax_labels(self.logits(x))


def argmax_labels(scores: Any) -> np.ndarray:
    """1-based argmax per row; ties resolve to the lowest class index."""

    return np.argmax(np.atleast_2d(np.asarray(scores, dtype=np.float64)), axis=1) + 1


def classifier_spec(dim: int, class_count: int, config: ClassifierConfig) -> MlpSpec:
    return MlpSpec.build(
        dim,
        config.hidden,
        class_count,
        activation=config.activation,
        weight_decay=config.weight_decay,
        dropout=config.dropout,
        batch_norm=config.batch_norm,
    )


def classifier_loss(
    spec: MlpSpec,
    theta: Tensor | ParamVector,
    x: np.ndarray,
    labels: np.ndarray,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
    batch_stats: dict[str, np.ndarray] | None = None,
) -> Tensor:
    """Mean softmax cross-entropy for 1-based ``labels``."""

    logits = mlp_forward(spec, theta, x, training=training, rng=rng, batch_stats=batch_stats)
    return softmax_cross_entropy(logits, np.asarray(labels, dtype=np.int64) - 1)


def _update_running_stats(
    spec: MlpSpec, params: ParamVector, stats: dict[str, np.ndarray]
) -> ParamVector:
    layout = mlp_layout(spec)
    values = params.values.copy()
    for kind, key in (("running_mean", "mean"), ("running_var", "var")):
        slot = layout.slot("norm", kind)
        current = values[slot.start : slot.stop]
        values[slot.start : slot.stop] = (1 - _BN_MOMENTUM) * current + _BN_MOMENTUM * stats[key]
    return params.with_values(values)


def fit_classifier(
    spec: MlpSpec,
    params: ParamVector,
    x: np.ndarray,
    labels: np.ndarray,
    config: ClassifierConfig,
    rng: np.random.Generator,
) -> ParamVector:
    """Minibatch AdamW on the cross-entropy, starting from ``params``."""

    state = init_optimizer(params, lr=config.lr, weight_decay=spec.weight_decay)
    n = x.shape[0]
    size = min(config.batch_size, n)
    for _ in range(config.steps):
        idx = rng.choice(n, size=size, replace=False) if size < n else np.arange(n)
        theta = params.tensor(requires_grad=True)
        stats: dict[str, np.ndarray] | None = {} if spec.batch_norm else None
        loss = classifier_loss(
            spec, theta, x[idx], labels[idx], training=True, rng=rng, batch_stats=stats
        )
        loss.backward()
        params, state = optimizer_step(params, theta.grad, state)
        if stats:
            params = _update_running_stats(spec, params, stats)
    return params


def train_on_labels(
    x: np.ndarray,
    labels: np.ndarray,
    class_count: int,
    config: ClassifierConfig,
    seed: int,
    *,
    init: Classifier | None = None,
) -> Classifier:
    """Fit a classifier to ``(x, labels)``; warm-started from ``init`` when given."""

    spec = init.spec if init is not None else classifier_spec(x.shape[1], class_count, config)
    params = init.theta if init is not None else init_params(spec, rng_for(seed, "init"))
    params = fit_classifier(spec, params, x, labels, config, rng_for(seed, "batches"))
    model = Classifier(spec, params, class_count)
    train_acc = float(np.mean(model.predict(x) == labels))
    return replace(model, train_accuracy=train_acc)


def train_source(
    source: LabeledDataset, config: ClassifierConfig | None = None, *, seed: int | None = None
) -> Classifier:
    """theta^(1): cross-entropy fit on the labeled source domain."""

    config = config or ClassifierConfig()
    seed = config.seed if seed is None else seed
    class_count = int(source.class_count or source.labels.max())
    with operation_logger("train_source", n=source.n, class_count=class_count) as op:
        model = train_on_labels(
            source.features, source.labels, class_count, config, derive_seed(seed, "source")
        )
        present = set(np.unique(source.labels).tolist())
        absent = [c for c in range(1, class_count + 1) if c not in present]
        if absent:
            message = f"classes absent from source: {absent}"
            logger.warning(
                "absent_source_class",
                extra={"event": "absent_source_class", "classes": absent},
            )
            model = replace(model, warnings=(*model.warnings, message))
        op.success({"train_accuracy": model.train_accuracy})
    return model


def pseudo_label(h: Classifier, x: Any) -> np.ndarray | int:
    """Hard labels ``argmax_c h(x)_c`` (1-based); a single row returns an int."""

    features = np.asarray(x, dtype=np.float64)
    labels = h.predict(features)
    return int(labels[0]) if features.ndim == 1 else labels


def self_train(
    theta_t: Classifier,
    unlabeled: UnlabeledDataset,
    config: ClassifierConfig | None = None,
    *,
    seed: int | None = None,
) -> Classifier:
    """Fit pseudo-labels produced once by ``theta_t`` on ``unlabeled``."""

    config = config or ClassifierConfig()
    seed = config.seed if seed is None else seed
    x = unlabeled.features
    labels = theta_t.predict(x)
    warnings: list[str] = []
    if config.confidence_threshold is not None:
        keep = theta_t.predict_proba(x).max(axis=1) >= config.confidence_threshold
        if keep.any():
            x, labels = x[keep], labels[keep]
        else:
            warnings.append("no pseudo-label passed the confidence threshold; all kept")
    if np.unique(labels).size == 1:
        warnings.append(f"degenerate pseudo-labels: every point assigned class {int(labels[0])}")
        logger.warning(
            "degenerate_pseudo_labels",
            extra={
                "event": "degenerate_pseudo_labels",
                "time_index": unlabeled.time_index,
                "label": int(labels[0]),
            },
        )
    model = train_on_labels(
        x,
        labels,
        theta_t.class_count,
        config,
        seed,
        init=theta_t if config.warm_start else None,
    )
    return replace(model, warnings=tuple(warnings))


@dataclass(frozen=True, eq=False)
class ChainResult:
    final: Classifier
    steps: tuple[Classifier, ...] = ()
    initial: Classifier | None = None

    def in_force(self) -> tuple[Classifier, ...]:
        """Classifier after each walk position, starting with the one the chain began from."""

        return (self.initial or self.final, *self.steps)


def gradual_chain(
    theta1: Classifier,
    chain: Sequence[UnlabeledDataset],
    config: ClassifierConfig | None = None,
    *,
    seed: int | None = None,
) -> ChainResult:
    """``theta^(k+1) = ST(theta^(k), U^(k+1))`` folded left to right."""

    config = config or ClassifierConfig()
    seed = config.seed if seed is None else seed
    current = theta1
    steps: list[Classifier] = []
    for k, unlabeled in enumerate(chain, start=1):
        current = self_train(current, unlabeled, config, seed=derive_seed(seed, "self_train", k))
        steps.append(current)
        logger.debug(
            "self_train_step",
            extra={"event": "self_train_step", "step_index": k, "time_index": unlabeled.time_index},
        )
    return ChainResult(final=current, steps=tuple(steps), initial=theta1)


def source_only(
    source: LabeledDataset, config: ClassifierConfig | None = None, *, seed: int | None = None
) -> Classifier:
    return train_source(source, config, seed=seed)


def gradual_self_train(
    sequence: DomainSequence, config: ClassifierConfig | None = None, *, seed: int | None = None
) -> ChainResult:
    """Source fit followed by self-training over the real domains only."""

    theta1 = train_source(sequence.source, config, seed=seed)
    return gradual_chain(theta1, sequence.unlabeled, config, seed=seed)


@dataclass(frozen=True)
class CycleReport:
    alpha: float
    cycle_loss: float
    cycle_accuracy: float
    forward_target_accuracy: float | None = None


def cycle_consistency(
    forward_final: Classifier,
    walk: Sequence[UnlabeledDataset],
    source: LabeledDataset,
    config: ClassifierConfig | None = None,
    *,
    seed: int | None = None,
    alpha: float = 1.0,
    target: LabeledDataset | None = None,
) -> CycleReport:
    """Run the chain back from target pseudo-labels to the source and score it.

    ``walk`` is the forward walk in ascending time, source first and target last.
    """

    config = config or ClassifierConfig()
    seed = config.seed if seed is None else seed
    if not walk:
        raise GdaFlowError("cycle consistency needs a non-empty walk", code="INVALID_INPUT")
    target_u = walk[-1]
    target_labels = forward_final.predict(target_u.features)
    theta_k = train_on_labels(
        target_u.features,
        target_labels,
        forward_final.class_count,
        config,
        derive_seed(seed, "cycle", "target"),
    )
    backward = list(reversed(walk[:-1]))
    if not backward or abs(backward[-1].time_index - source.time_index) > ALPHA_TOL:
        backward.append(source.without_labels())
    chain = gradual_chain(theta_k, backward, config, seed=derive_seed(seed, "cycle"))
    theta_hat = chain.final
    loss = classifier_loss(theta_hat.spec, theta_hat.theta, source.features, source.labels).item()
    forward_acc = accuracy(forward_final, target) if target is not None else None
    return CycleReport(
        alpha=float(alpha),
        cycle_loss=float(loss),
        cycle_accuracy=accuracy(theta_hat, source),
        forward_target_accuracy=forward_acc,
    )


class AlphaSelection(NamedTuple):
    best_alpha: float
    reports: tuple[CycleReport, ...]
    failures: dict[float, str]
    pearson_r: float | None = None


def dedupe_alphas(alphas: Sequence[float]) -> list[float]:
    unique: list[float] = []
    for alpha in sorted(float(a) for a in alphas):
        if unique and abs(alpha - unique[-1]) <= ALPHA_TOL:
            logger.warning(
                "duplicate_alpha",
                extra={"event": "duplicate_alpha", "alpha": alpha},
            )
            continue
        unique.append(alpha)
    return unique


def _best(reports: Sequence[CycleReport]) -> float:
    best = reports[0]
    for report in reports[1:]:
        # ascending alphas and a strict comparison: ties keep the smaller alpha
        if report.cycle_loss < best.cycle_loss:
            best = report
    return best.alpha


def select_alpha(
    flow: FlowModel,
    domains: DomainSequence,
    alphas: Sequence[float],
    config: RunConfig | None = None,
    *,
    threads: int = 1,
) -> AlphaSelection:
    """Choose the alpha whose full forward and cycle pipeline has the lowest cycle loss."""

    from .interpolate import PseudoDomainCache, run_gda
    from .validation import validate_alpha

    config = config or RunConfig()
    if not alphas:
        raise GdaFlowError("alphas must not be empty", code="INVALID_INPUT")
    grid = dedupe_alphas(alphas)
    for alpha in grid:
        validate_alpha(alpha, domains.horizon)

    training = domains.training_view()
    target = domains.target_evaluation()
    cache = PseudoDomainCache()

    def evaluate(alpha: float) -> CycleReport:
        run = run_gda(domains.source, training, flow, alpha, config.n_generate, config, cache=cache)
        return cycle_consistency(
            run.classifier,
            run.cycle_walk(config.reverse_mode),
            domains.source,
            config.classifier,
            seed=derive_seed(config.seed, "cycle", alpha),
            alpha=alpha,
            target=target,
        )

    reports: list[CycleReport] = []
    failures: dict[float, str] = {}
    with operation_logger("select_alpha", alphas=grid, threads=threads) as op:
        workers = max(1, min(threads, len(grid)))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {alpha: pool.submit(evaluate, alpha) for alpha in grid}
        for alpha in grid:
            try:
                reports.append(futures[alpha].result())
            except GdaFlowError as exc:
                failures[alpha] = f"{exc.code}: {exc}"
                logger.warning(
                    "alpha_failed",
                    extra={"event": "alpha_failed", "alpha": alpha, "code": exc.code},
                )
            except Exception as exc:
                failures[alpha] = f"INTERNAL_ERROR: {type(exc).__name__}: {exc}"
                logger.warning(
                    "alpha_failed",
                    extra={"event": "alpha_failed", "alpha": alpha, "code": "INTERNAL_ERROR"},
                    exc_info=True,
                )
        if not reports:
            raise GdaFlowError(
                "every alpha candidate failed",
                code="INTERNAL_ERROR",
                context={"failures": {str(a): msg for a, msg in failures.items()}},
            )
        best = _best(reports)
        r = _correlation(reports)
        op.success({"best_alpha": best, "failed": len(failures), "pearson_r": r})
    return AlphaSelection(best, tuple(reports), failures, r)


def _correlation(reports: Sequence[CycleReport]) -> float | None:
    pairs = [
        (r.forward_target_accuracy, r.cycle_accuracy)
        for r in reports
        if r.forward_target_accuracy is not None
    ]
    if len(pairs) < 2:
        return None
    r = pearson([p[0] for p in pairs], [p[1] for p in pairs])
    return None if math.isnan(r) else r


__all__ = [
    "AlphaSelection",
    "ChainResult",
    "Classifier",
    "CycleReport",
    "argmax_labels",
    "classifier_loss",
    "classifier_spec",
    "cycle_consistency",
    "dedupe_alphas",
    "fit_classifier",
    "gradual_chain",
    "gradual_self_train",
    "pseudo_label",
    "select_alpha",
    "self_train",
    "source_only",
    "train_on_labels",
    "train_source",
]
