"""Metrics, distances and the experiment report."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from collections.abc import Iterable, Sequence
from dataclasses import astuple, dataclass, field, fields
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.stats import pearsonr

from .errors import GdaFlowError
from .utils import atomic_write_text, format_float

if TYPE_CHECKING:
    from .data import LabeledDataset

logger = logging.getLogger(__name__)

EXACT_W2_LIMIT = 512
CONFIG_HASH_PREFIX = "# config_hash="


def accuracy(h: Any, labeled: LabeledDataset) -> float:
    """Fraction of rows whose argmax prediction equals the label."""

    predictions = np.asarray(h.predict(labeled.features))
    return float(np.mean(predictions == labeled.labels))


def _points(name: str, value: Any) -> np.ndarray:
    array = np.asarray(value, dtype=np.float64)
    if array.ndim == 1:
        array = array[:, None]
    if array.ndim != 2 or not np.all(np.isfinite(array)):
        raise GdaFlowError(
            f"{name} must be a finite point set", code="INVALID_INPUT", context={"field": name}
        )
    return array


def wasserstein2(a: Any, b: Any) -> float:
    """Exact empirical 2-Wasserstein distance between equal-size point sets."""

    a = _points("A", getattr(a, "features", a))
    b = _points("B", getattr(b, "features", b))
    if a.shape != b.shape:
        raise GdaFlowError(
            "point sets must have equal size and dimension (subsample first)",
            code="SHAPE_MISMATCH",
            context={"A": list(a.shape), "B": list(b.shape)},
        )
    if a.shape[0] > EXACT_W2_LIMIT:
        raise GdaFlowError(
            f"exact assignment is capped at {EXACT_W2_LIMIT} points; subsample first",
            code="INVALID_INPUT",
            context={"n": a.shape[0]},
        )
    cost = cdist(a, b, metric="sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    return math.sqrt(max(float(cost[rows, cols].mean()), 0.0))


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Product-moment correlation; NaN (with a warning) when either side is constant."""

    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise GdaFlowError(
            "pearson needs two equal-length sequences of at least 2 values",
            code="INVALID_INPUT",
            context={"xs": list(x.shape), "ys": list(y.shape)},
        )
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        logger.warning("pearson_undefined", extra={"event": "pearson_undefined"})
        return math.nan
    return float(pearsonr(x, y)[0])


@dataclass(frozen=True)
class ExperimentRow:
    method: str
    alpha: float | None
    seed: int
    target_accuracy: float | None
    cycle_loss: float | None
    cycle_accuracy: float | None
    adjacent_max_w2: float | None
    wallclock_s: float | None = None


COLUMNS: tuple[str, ...] = tuple(f.name for f in fields(ExperimentRow))


@dataclass
class ExperimentReport:
    rows: list[ExperimentRow] = field(default_factory=list)

    def add(self, row: ExperimentRow) -> None:
        for name in ("target_accuracy", "cycle_accuracy"):
            value = getattr(row, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise GdaFlowError(f"{name} must lie in [0, 1]", code="INVALID_INPUT")
        if row.adjacent_max_w2 is not None and row.adjacent_max_w2 < 0:
            raise GdaFlowError("adjacent_max_w2 must be >= 0", code="INVALID_INPUT")
        self.rows.append(row)

    def extend(self, rows: Iterable[ExperimentRow]) -> None:
        for row in rows:
            self.add(row)


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format_float(value)
    return str(value)


def render_csv(columns: Sequence[str], rows: Iterable[Sequence[Any]], config_hash: str) -> str:
    buffer = io.StringIO()
    buffer.write(f"{CONFIG_HASH_PREFIX}{config_hash}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return buffer.getvalue()


def emit_report(
    report: ExperimentReport,
    path: str | os.PathLike[str],
    *,
    config_hash: str,
    append: bool = False,
) -> Path:
    """Write the report CSV; with ``append`` new rows go under an existing file's rows."""

    target = Path(path)
    text = render_csv(COLUMNS, (astuple(r) for r in report.rows), config_hash)
    if append and target.is_file():
        existing = target.read_text(encoding="utf-8")
        lines = existing.splitlines()
        if len(lines) < 2 or lines[1].split(",") != list(COLUMNS):
            raise GdaFlowError(
                "cannot append: existing file is not an experiment report",
                code="IO_ERROR",
                context={"path": str(target)},
            )
        body = text.split("\n", 2)[2]
        text = existing + body
    try:
        return atomic_write_text(target, text)
    except OSError as exc:
        raise GdaFlowError(
            f"cannot write report: {exc.strerror}",
            code="IO_ERROR",
            context={"path": str(target)},
        ) from exc


__all__ = [
    "COLUMNS",
    "EXACT_W2_LIMIT",
    "ExperimentReport",
    "ExperimentRow",
    "accuracy",
    "emit_report",
    "pearson",
    "render_csv",
    "wasserstein2",
]
