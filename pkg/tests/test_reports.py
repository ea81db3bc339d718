import json
from pathlib import Path

from gdaflow.cnf.train import FlowEpochRecord, FlowHistory
from gdaflow.reports import (
    HISTORY_COLUMNS,
    trace_rows,
    walk_provenance,
    write_cycle_reports,
    write_history,
    write_run_manifest,
)
from gdaflow.selftrain import CycleReport


def test_history_csv(tmp_path: Path):
    history = FlowHistory(
        gamma=5.0,
        records=[FlowEpochRecord(0, 1.0, 2.5, 0.1, 6.0), FlowEpochRecord(0, 2.0, 3.0, 0.0, 6.0)],
    )
    lines = write_history(history, tmp_path / "history.csv", "h").read_text().splitlines()
    assert lines[1] == ",".join(HISTORY_COLUMNS)
    assert lines[2] == "0,1,2.5,0.10000000000000001,6"
    assert len(lines) == 4


def test_cycle_reports_include_failures_and_correlation(tmp_path: Path):
    path = write_cycle_reports(
        [CycleReport(1.0, 0.2, 0.95, 0.9), CycleReport(0.2, 0.3, 0.9, 0.85)],
        {0.5: "TRANSPORT_FAILED: boom"},
        tmp_path / "cycle.csv",
        "h",
        pearson_r=0.5,
    )
    lines = path.read_text().splitlines()
    assert [line.split(",")[0] for line in lines[2:5]] == ["0.20000000000000001", "0.5", "1"]
    assert "failed: TRANSPORT_FAILED: boom" in lines[3]
    assert lines[-1] == "# pearson_r=0.5"


def test_run_manifest_is_sorted_json(tmp_path: Path):
    path = write_run_manifest({"b": Path("x"), "a": 1}, tmp_path / "manifest.json")
    text = path.read_text()
    assert json.loads(text) == {"a": 1, "b": "x"}
    assert text.index('"a"') < text.index('"b"')


def test_trace_rows_follow_the_walk(moons_sequence, tiny_run_config):
    from gdaflow.interpolate import run_gda

    run = run_gda(moons_sequence.source, moons_sequence, None, 1.0, config=tiny_run_config)
    rows = trace_rows(run, moons_sequence, CycleReport(1.0, 0.1, 0.9))
    assert [row[1] for row in rows] == [0, 1, 2]
    assert all(row[4] is not None for row in rows)
    assert rows[0][5] == 0.1
    without_labels = trace_rows(run, moons_sequence.training_view())
    assert without_labels[0][4] is not None and without_labels[1][4] is None
    assert [step["kind"] for step in walk_provenance(run)] == ["real"] * 3
