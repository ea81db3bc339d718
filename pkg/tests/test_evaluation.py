import itertools
import math
from pathlib import Path

import numpy as np
import pytest

from gdaflow.data import LabeledDataset
from gdaflow.errors import GdaFlowError
from gdaflow.evaluation import (
    COLUMNS,
    ExperimentReport,
    ExperimentRow,
    accuracy,
    emit_report,
    pearson,
    wasserstein2,
)


class _FirstFeatureSign:
    def predict(self, x):
        return np.where(np.asarray(x)[:, 0] > 0, 2, 1)


def test_accuracy_counts_matching_rows():
    data = LabeledDataset(np.array([[1.0], [-1.0], [2.0], [-3.0]]), np.array([2, 1, 1, 1]))
    assert accuracy(_FirstFeatureSign(), data) == pytest.approx(0.75)


def test_w2_of_a_translation_is_the_shift():
    a = np.random.default_rng(0).normal(size=(25, 2))
    assert wasserstein2(a, a + np.array([0.6, 0.8])) == pytest.approx(1.0)
    assert wasserstein2(a, a[::-1]) == pytest.approx(0.0, abs=1e-12)


def test_w2_needs_equal_sizes():
    with pytest.raises(GdaFlowError) as exc:
        wasserstein2(np.zeros((3, 2)), np.zeros((4, 2)))
    assert exc.value.code == "SHAPE_MISMATCH"


def test_w2_caps_exact_assignment():
    big = np.zeros((600, 1))
    with pytest.raises(GdaFlowError) as exc:
        wasserstein2(big, big)
    assert exc.value.code == "INVALID_INPUT"


def test_pearson():
    assert pearson([1.0, 2.0, 3.0], [2.0, 4.0, 6.0]) == pytest.approx(1.0)
    assert pearson([1.0, 2.0, 3.0], [3.0, 2.0, 1.0]) == pytest.approx(-1.0)
    assert math.isnan(pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]))
    with pytest.raises(GdaFlowError):
        pearson([1.0], [1.0])


def test_report_rejects_out_of_range_metrics():
    report = ExperimentReport()
    with pytest.raises(GdaFlowError):
        report.add(ExperimentRow("ours", 0.5, 0, 1.2, None, None, None))
    with pytest.raises(GdaFlowError):
        report.add(ExperimentRow("ours", 0.5, 0, 0.9, None, None, -1.0))
    assert report.rows == []


def test_emit_report_writes_hash_header_and_blank_cells(tmp_path: Path):
    report = ExperimentReport()
    report.add(ExperimentRow("source-only", None, 3, 0.5, None, None, None))
    path = emit_report(report, tmp_path / "report.csv", config_hash="abc123")
    lines = path.read_text().splitlines()
    assert lines[0] == "# config_hash=abc123"
    assert lines[1] == ",".join(COLUMNS)
    assert lines[2] == "source-only,,3,0.5,,,,"


def test_emit_report_append_keeps_one_header(tmp_path: Path):
    target = tmp_path / "report.csv"
    first = ExperimentReport([ExperimentRow("ours", 0.5, 0, 0.9, 0.1, 1.0, 0.2)])
    second = ExperimentReport([ExperimentRow("gradual", 1.0, 0, 0.8, 0.2, 0.9, 0.4)])
    emit_report(first, target, config_hash="h")
    emit_report(second, target, config_hash="h", append=True)
    lines = target.read_text().splitlines()
    assert len(lines) == 4
    assert lines[2].startswith("ours,") and lines[3].startswith("gradual,")


def test_append_refuses_foreign_files(tmp_path: Path):
    target = tmp_path / "report.csv"
    target.write_text("something else\n")
    with pytest.raises(GdaFlowError) as exc:
        emit_report(ExperimentReport(), target, config_hash="h", append=True)
    assert exc.value.code == "IO_ERROR"


def _brute_force_w2(a: np.ndarray, b: np.ndarray) -> float:
    best = min(
        sum(float(np.sum((a[i] - b[j]) ** 2)) for i, j in enumerate(perm))
        for perm in itertools.permutations(range(len(b)))
    )
    return math.sqrt(best / len(a))


def test_w2_matches_every_pairing():
    rng = np.random.default_rng(5)
    for _ in range(100):
        n = int(rng.integers(1, 7))
        a, b = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
        assert wasserstein2(a, b) == pytest.approx(_brute_force_w2(a, b), rel=1e-12, abs=1e-12)


def test_w2_of_sorted_one_dimensional_sets():
    assert wasserstein2(np.array([[0.0], [1.0]]), np.array([[3.0], [2.0]])) == pytest.approx(2.0)


def test_w2_is_a_metric_on_random_triples():
    rng = np.random.default_rng(8)
    for _ in range(30):
        n = int(rng.integers(2, 9))
        a, b, c = (rng.normal(size=(n, 2)) for _ in range(3))
        assert wasserstein2(a, b) == pytest.approx(wasserstein2(b, a))
        assert wasserstein2(a, c) <= wasserstein2(a, b) + wasserstein2(b, c) + 1e-12
        assert wasserstein2(a, a) == pytest.approx(0.0, abs=1e-12)
