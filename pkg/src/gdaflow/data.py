"""Datasets, domain sequences, synthetic generators and their file formats.

Labels are integers ``1..C``. Only the source domain exposes labels to training code:
labels of later domains live in :class:`HeldOutLabels`, which
:meth:`DomainSequence.training_view` strips.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .errors import GdaFlowError
from .utils import atomic_write_text, derive_seed, format_float
from .validation import as_matrix

logger = logging.getLogger(__name__)

TIME_TOL = 1e-9
MANIFEST_VERSION = 1


@dataclass(frozen=True, eq=False)
class UnlabeledDataset:
    features: np.ndarray
    time_index: float = 1.0

    def __post_init__(self) -> None:
        features = as_matrix("features", self.features)
        if features.shape[0] < 1:
            raise GdaFlowError("dataset must contain at least one row", code="INVALID_INPUT")
        features.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "time_index", float(self.time_index))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    time_index: float = 1.0
    class_count: int | None = None

    def __post_init__(self) -> None:
        features = as_matrix("features", self.features)
        labels = np.asarray(self.labels)
        if features.shape[0] < 1:
            raise GdaFlowError("dataset must contain at least one row", code="INVALID_INPUT")
        if labels.shape != (features.shape[0],):
            raise GdaFlowError(
                "labels must be one integer per feature row",
                code="SHAPE_MISMATCH",
                context={"rows": features.shape[0], "labels": list(labels.shape)},
            )
        if labels.dtype.kind == "f":
            if not np.all(np.isfinite(labels)) or np.any(labels != np.round(labels)):
                raise GdaFlowError("labels must be integers", code="INVALID_INPUT")
        labels = labels.astype(np.int64)
        class_count = int(labels.max()) if self.class_count is None else int(self.class_count)
        if labels.min() < 1 or labels.max() > class_count:
            raise GdaFlowError(
                f"labels must lie in 1..{class_count}",
                code="INVALID_INPUT",
                context={"min": int(labels.min()), "max": int(labels.max())},
            )
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "time_index", float(self.time_index))
        object.__setattr__(self, "class_count", class_count)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def without_labels(self) -> UnlabeledDataset:
        return UnlabeledDataset(self.features, self.time_index)


Dataset = LabeledDataset | UnlabeledDataset


@dataclass(frozen=True, eq=False)
class HeldOutLabels:
    """Evaluation-only labels of unlabeled domains, keyed by time index."""

    labels: Mapping[float, np.ndarray] = field(default_factory=dict)

    def for_time(self, time_index: float) -> np.ndarray | None:
        for t, labels in self.labels.items():
            if abs(t - time_index) <= TIME_TOL:
                return labels
        return None


@dataclass(frozen=True, eq=False)
class DomainSequence:
    source: LabeledDataset
    unlabeled: tuple[UnlabeledDataset, ...] = ()
    held_out: HeldOutLabels | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "unlabeled", tuple(self.unlabeled))
        if abs(self.source.time_index - 1.0) > TIME_TOL:
            raise GdaFlowError(
                "the source domain must sit at time index 1",
                code="INVALID_INPUT",
                context={"time_index": self.source.time_index},
            )
        times = self.time_indices
        if any(b - a <= TIME_TOL for a, b in zip(times[:-1], times[1:], strict=False)):
            raise GdaFlowError(
                "domain time indices must be strictly ascending",
                code="INVALID_INPUT",
                context={"time_indices": list(times)},
            )
        dims = {d.dim for d in self.unlabeled} | {self.source.dim}
        if len(dims) != 1:
            raise GdaFlowError(
                "all domains must share one feature dimension",
                code="SHAPE_MISMATCH",
                context={"dims": sorted(dims)},
            )

    @property
    def time_indices(self) -> tuple[float, ...]:
        return (self.source.time_index, *(d.time_index for d in self.unlabeled))

    @property
    def horizon(self) -> float:
        return self.time_indices[-1]

    @property
    def dim(self) -> int:
        return self.source.dim

    @property
    def class_count(self) -> int:
        return int(self.source.class_count or 0)

    @property
    def target(self) -> UnlabeledDataset:
        return self.unlabeled[-1] if self.unlabeled else self.source.without_labels()

    def mean_size(self) -> int:
        sizes = [self.source.n, *(d.n for d in self.unlabeled)]
        return max(1, round(sum(sizes) / len(sizes)))

    def feature_domains(self) -> tuple[tuple[float, np.ndarray], ...]:
        """``(time_index, features)`` for every domain, source included."""

        return (
            (self.source.time_index, self.source.features),
            *((d.time_index, d.features) for d in self.unlabeled),
        )

    def unlabeled_at(self, time_index: float) -> UnlabeledDataset | None:
        if abs(time_index - self.source.time_index) <= TIME_TOL:
            return self.source.without_labels()
        for domain in self.unlabeled:
            if abs(domain.time_index - time_index) <= TIME_TOL:
                return domain
        return None

    def training_view(self) -> DomainSequence:
        """The same sequence with every held-out label removed."""

        return replace(self, held_out=None)

    def evaluation_dataset(self, time_index: float) -> LabeledDataset | None:
        """Labeled view of a domain for scoring; None when no labels are known."""

        if abs(time_index - self.source.time_index) <= TIME_TOL:
            return self.source
        domain = self.unlabeled_at(time_index)
        labels = self.held_out.for_time(time_index) if self.held_out else None
        if domain is None or labels is None:
            return None
        return LabeledDataset(domain.features, labels, domain.time_index, self.source.class_count)

    def target_evaluation(self) -> LabeledDataset | None:
        return self.evaluation_dataset(self.horizon) if self.unlabeled else None


# generators -------------------------------------------------------------------


def make_two_moons(
    n: int, noise_sd: float, seed: int, *, time_index: float = 1.0
) -> LabeledDataset:
    """Two interleaved half circles, ``n / 2`` points each, plus isotropic Gaussian noise."""

    if n < 2 or n % 2:
        raise GdaFlowError("n must be an even integer >= 2", code="INVALID_INPUT", context={"n": n})
    if not (math.isfinite(noise_sd) and noise_sd >= 0):
        raise GdaFlowError("noise_sd must be >= 0", code="INVALID_INPUT")
    half = n // 2
    angle = np.linspace(0.0, np.pi, half)
    upper = np.stack([np.cos(angle), np.sin(angle)], axis=1)
    lower = np.stack([1.0 - np.cos(angle), 0.5 - np.sin(angle)], axis=1)
    features = np.concatenate([upper, lower], axis=0)
    labels = np.repeat([1, 2], half)
    if noise_sd > 0:
        features = features + np.random.default_rng(seed).normal(0.0, noise_sd, features.shape)
    return LabeledDataset(features, labels, time_index, class_count=2)


def make_rotating_blobs(
    n: int,
    class_count: int,
    spread: float,
    seed: int,
    *,
    radius: float = 2.0,
    time_index: float = 1.0,
) -> LabeledDataset:
    """Gaussian blobs centred on a circle; class ``c`` sits at angle ``2 pi (c - 1) / C``."""

    if n < class_count or class_count < 2:
        raise GdaFlowError(
            "need class_count >= 2 and n >= class_count",
            code="INVALID_INPUT",
            context={"n": n, "class_count": class_count},
        )
    if not (math.isfinite(spread) and spread >= 0):
        raise GdaFlowError("spread must be >= 0", code="INVALID_INPUT")
    labels = np.arange(n) % class_count + 1
    angles = 2.0 * np.pi * (labels - 1) / class_count
    centres = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    features = centres + np.random.default_rng(seed).normal(0.0, spread, centres.shape)
    return LabeledDataset(features, labels, time_index, class_count=class_count)


def rotation_matrix(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def rotate(dataset: Dataset, angle: float) -> Dataset:
    """Rotate every feature row about the origin by ``angle`` radians."""

    if dataset.dim != 2:
        raise GdaFlowError(
            "rotation is defined for 2-D features only",
            code="INVALID_INPUT",
            context={"dim": dataset.dim},
        )
    return replace(dataset, features=dataset.features @ rotation_matrix(angle).T)


def make_rotating_sequence(
    base: LabeledDataset | Callable[[int], LabeledDataset],
    angles: Sequence[float],
    seed: int,
    *,
    shared_cloud: bool = False,
) -> DomainSequence:
    """Domain ``k`` (time index ``k + 1``) is a fresh draw rotated by ``angles[k]`` radians.

    ``base`` is either a generator ``draw(seed) -> LabeledDataset`` or a fixed dataset. A
    generator is called once per domain with ``derive_seed(seed, "domain", k)``; a fixed
    dataset is bootstrap-resampled per domain with the same seeds. ``shared_cloud`` rotates
    the source points themselves instead.
    """

    if not angles or abs(angles[0]) > 1e-12:
        raise GdaFlowError("angles must start at 0", code="INVALID_INPUT")
    if any(b < a for a, b in zip(angles[:-1], angles[1:], strict=False)):
        raise GdaFlowError("angles must be ascending", code="INVALID_INPUT")

    def draw(k: int) -> LabeledDataset:
        domain_seed = derive_seed(seed, "domain", k)
        if callable(base):
            return base(domain_seed)
        if k == 0:
            return base
        rows = np.random.default_rng(domain_seed).integers(0, base.n, size=base.n)
        return replace(base, features=base.features[rows], labels=base.labels[rows])

    source = replace(draw(0), time_index=1.0)
    unlabeled: list[UnlabeledDataset] = []
    held_out: dict[float, np.ndarray] = {}
    for k, angle in enumerate(angles[1:], start=1):
        cloud = source if shared_cloud else draw(k)
        rotated = rotate(replace(cloud, time_index=float(k + 1)), angle)
        unlabeled.append(rotated.without_labels())
        held_out[float(k + 1)] = rotated.labels
    return DomainSequence(source, tuple(unlabeled), HeldOutLabels(held_out))


def two_moons_sequence(
    n: int,
    noise_sd: float,
    angles_deg: Sequence[float],
    seed: int,
    *,
    shared_cloud: bool = False,
) -> DomainSequence:
    return make_rotating_sequence(
        lambda s: make_two_moons(n, noise_sd, s),
        [math.radians(a) for a in angles_deg],
        seed,
        shared_cloud=shared_cloud,
    )


def blobs_sequence(
    n: int,
    class_count: int,
    spread: float,
    angles_deg: Sequence[float],
    seed: int,
    *,
    shared_cloud: bool = False,
) -> DomainSequence:
    return make_rotating_sequence(
        lambda s: make_rotating_blobs(n, class_count, spread, s),
        [math.radians(a) for a in angles_deg],
        seed,
        shared_cloud=shared_cloud,
    )


def subsample(dataset: Any, n: int, seed: int) -> Any:
    """At most ``n`` rows drawn without replacement; accepts a dataset or a matrix."""

    features = dataset.features if hasattr(dataset, "features") else np.asarray(dataset, float)
    if n < 1:
        raise GdaFlowError("n must be >= 1", code="INVALID_INPUT", context={"n": n})
    if features.shape[0] <= n:
        return dataset
    rows = np.sort(np.random.default_rng(seed).choice(features.shape[0], size=n, replace=False))
    if isinstance(dataset, LabeledDataset):
        return replace(dataset, features=dataset.features[rows], labels=dataset.labels[rows])
    if isinstance(dataset, UnlabeledDataset):
        return replace(dataset, features=dataset.features[rows])
    return features[rows]


# file formats -----------------------------------------------------------------


def dumps_dataset(dataset: Dataset) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow([*(f"x_{i}" for i in range(dataset.dim)), "label", "time_index"])
    labels = dataset.labels if isinstance(dataset, LabeledDataset) else None
    time_text = format_float(dataset.time_index)
    for i, row in enumerate(dataset.features):
        label = str(int(labels[i])) if labels is not None else ""
        writer.writerow([*(format_float(v) for v in row), label, time_text])
    return buffer.getvalue()


def save_dataset(dataset: Dataset, path: str | os.PathLike[str]) -> Path:
    return atomic_write_text(path, dumps_dataset(dataset))


def _malformed(path: Any, line: int, message: str) -> GdaFlowError:
    return GdaFlowError(
        f"{path}: line {line}: {message}",
        code="INVALID_INPUT",
        context={"path": str(path), "line": line},
    )


def loads_dataset(text: str, *, source: Any = "<string>") -> Dataset:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise _malformed(source, 1, "empty file")
    header = [h.strip() for h in rows[0]]
    dim = len(header) - 2
    expected = [*(f"x_{i}" for i in range(dim)), "label", "time_index"]
    if dim < 1 or header != expected:
        raise _malformed(source, 1, "header must be x_0,...,x_{D-1},label,time_index")

    features: list[list[float]] = []
    labels: list[int | None] = []
    time_index: float | None = None
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != dim + 2:
            raise _malformed(source, line, f"expected {dim + 2} fields, got {len(row)}")
        try:
            values = [float(v) for v in row[:dim]]
            t = float(row[-1])
        except ValueError:
            raise _malformed(source, line, "non-numeric value") from None
        if not all(math.isfinite(v) for v in values) or not math.isfinite(t):
            raise _malformed(source, line, "non-finite value")
        if time_index is None:
            time_index = t
        elif abs(t - time_index) > TIME_TOL:
            raise _malformed(source, line, "time_index differs from the first row")
        token = row[dim].strip()
        if token:
            try:
                label = int(token)
            except ValueError:
                raise _malformed(source, line, "label must be an integer") from None
            if label < 1:
                raise _malformed(source, line, "label must be >= 1")
            labels.append(label)
        else:
            labels.append(None)
        if (labels[0] is None) != (labels[-1] is None):
            raise _malformed(source, line, "mixes labeled and unlabeled rows")
        features.append(values)

    if not features:
        raise _malformed(source, len(rows) + 1, "no data rows")
    matrix = np.asarray(features, dtype=np.float64)
    assert time_index is not None
    if labels[0] is None:
        return UnlabeledDataset(matrix, time_index)
    return LabeledDataset(matrix, np.asarray(labels, dtype=np.int64), time_index)


def load_dataset(path: str | os.PathLike[str]) -> Dataset:
    source = Path(path)
    if not source.is_file():
        raise GdaFlowError(
            f"Dataset file not found: {source}", code="NOT_FOUND", context={"path": str(source)}
        )
    return loads_dataset(source.read_text(encoding="utf-8"), source=source)


def save_sequence_manifest(
    sequence: DomainSequence, directory: str | os.PathLike[str], *, prefix: str = "domain"
) -> Path:
    """Write one CSV per domain plus ``manifest.json``; held-out labels stay in the CSVs."""

    root = Path(directory)
    entries = []
    for k, t in enumerate(sequence.time_indices):
        dataset = sequence.evaluation_dataset(t) or sequence.unlabeled_at(t)
        assert dataset is not None
        name = f"{prefix}_{k + 1}.csv"
        save_dataset(dataset, root / name)
        entries.append({"path": name, "time_index": t, "role": "source" if k == 0 else "unlabeled"})
    manifest = {
        "version": MANIFEST_VERSION,
        "class_count": sequence.class_count,
        "domains": entries,
    }
    return atomic_write_text(root / "manifest.json", json.dumps(manifest, indent=2) + "\n")


def load_sequence_manifest(path: str | os.PathLike[str]) -> DomainSequence:
    manifest_path = Path(path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    if not manifest_path.is_file():
        raise GdaFlowError(
            f"Manifest not found: {manifest_path}",
            code="NOT_FOUND",
            context={"path": str(manifest_path)},
        )
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        entries = manifest["domains"]
        class_count = manifest.get("class_count")
    except (ValueError, KeyError, TypeError) as exc:
        raise GdaFlowError(
            f"Invalid manifest ({type(exc).__name__})",
            code="INVALID_INPUT",
            context={"path": str(manifest_path)},
        ) from None
    if not entries:
        raise GdaFlowError("manifest lists no domains", code="INVALID_INPUT")

    datasets = []
    for entry in entries:
        dataset = load_dataset(manifest_path.parent / entry["path"])
        t = float(entry.get("time_index", dataset.time_index))
        if abs(t - dataset.time_index) > TIME_TOL:
            raise GdaFlowError(
                "manifest time_index disagrees with the dataset file",
                code="INVALID_INPUT",
                context={"path": entry["path"], "manifest": t, "file": dataset.time_index},
            )
        datasets.append(dataset)

    source = datasets[0]
    if not isinstance(source, LabeledDataset):
        raise GdaFlowError("the first manifest domain must be labeled", code="INVALID_INPUT")
    if class_count:
        source = replace(source, class_count=int(class_count))
    unlabeled = []
    held_out: dict[float, np.ndarray] = {}
    for dataset in datasets[1:]:
        if isinstance(dataset, LabeledDataset):
            held_out[dataset.time_index] = dataset.labels
            dataset = dataset.without_labels()
        unlabeled.append(dataset)
    logger.info(
        "sequence_loaded",
        extra={"event": "sequence_loaded", "path": str(manifest_path), "domains": len(datasets)},
    )
    return DomainSequence(source, tuple(unlabeled), HeldOutLabels(held_out) if held_out else None)


__all__ = [
    "Dataset",
    "DomainSequence",
    "HeldOutLabels",
    "LabeledDataset",
    "UnlabeledDataset",
    "blobs_sequence",
    "dumps_dataset",
    "load_dataset",
    "load_sequence_manifest",
    "loads_dataset",
    "make_rotating_blobs",
    "make_rotating_sequence",
    "make_two_moons",
    "rotate",
    "rotation_matrix",
    "save_dataset",
    "save_sequence_manifest",
    "subsample",
    "two_moons_sequence",
]
