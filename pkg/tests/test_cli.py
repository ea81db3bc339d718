from __future__ import annotations

import csv
import json
from collections.abc import Iterator
from pathlib import Path

import pytest
from click.testing import CliRunner, Result

import gdaflow.cli as cli_module
from gdaflow.cli import cli
from gdaflow.data import UnlabeledDataset, load_dataset

TINY_CONFIG = """\
seed: 0
flow:
  hidden: [6]
  steps_per_unit_time: 2
  epochs: 1
  batch_size: 20
classifier:
  hidden: [8]
  steps: 30
n_generate: 16
alphas: [0.5, 1.0]
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory: pytest.TempPathFactory) -> Iterator[Path]:
    root = tmp_path_factory.mktemp("cli")
    (root / "run.yaml").write_text(TINY_CONFIG, encoding="utf-8")
    with pytest.MonkeyPatch.context() as mp:
        # leave pytest's log capture handlers in place
        mp.setattr(cli_module, "configure_logging", lambda *args, **kwargs: None)
        mp.chdir(root)
        _invoke(
            root,
            "make-data", "two-moons", "--angles", "0,30", "--n", "20",
            "--noise-sd", "0.05", "--seed", "1", "--out-dir", "data",
        )
        _invoke(root, "train-flow", "--manifest", "data/manifest.json", "--out-dir", "flow")
        yield root


def _invoke(root: Path, *args: str, expect: int = 0) -> Result:
    result = CliRunner().invoke(cli, ["--config", str(root / "run.yaml"), *args])
    assert result.exit_code == expect, result.output
    return result


def _report(path: Path) -> list[dict[str, str]]:
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config_hash=")
    return list(csv.DictReader(line for line in lines[1:] if not line.startswith("#")))


@pytest.fixture(autouse=True)
def _quiet_logging(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setattr(cli_module, "configure_logging", lambda *args, **kwargs: None)


def test_make_data_writes_manifest(workspace: Path):
    manifest = json.loads((workspace / "data" / "manifest.json").read_text())
    assert [d["time_index"] for d in manifest["domains"]] == [1.0, 2.0]
    assert (workspace / "data" / "domain_2.csv").is_file()


def test_train_flow_outputs(workspace: Path):
    assert (workspace / "flow" / "flow.ckpt").is_file()
    history = _report(workspace / "flow" / "history.csv")
    assert len(history) == 2
    manifest = json.loads((workspace / "flow" / "run_manifest.json").read_text())
    assert manifest["command"] == "train-flow"
    assert manifest["config"]["flow"]["hidden"] == [6]


def test_run_all_methods(workspace: Path):
    _invoke(
        workspace,
        "run", "--manifest", "data/manifest.json", "--checkpoint", "flow/flow.ckpt",
        "--method", "ours", "--method", "gradual", "--method", "source-only",
        "--alpha", "0.5", "--out-dir", "out",
    )
    rows = _report(workspace / "out" / "report.csv")
    assert [r["method"] for r in rows] == ["ours", "gradual", "source-only"]
    assert rows[0]["alpha"] == "0.5" and rows[1]["alpha"] == "1"
    assert rows[2]["cycle_loss"] == "" and rows[2]["alpha"] == ""
    assert all(r["wallclock_s"] == "" for r in rows)
    assert (workspace / "out" / "trace" / "ours_seed0_alpha0p5.csv").is_file()
    manifest = json.loads((workspace / "out" / "run_manifest.json").read_text())
    kinds = [s["kind"] for s in manifest["runs"][0]["steps"]]
    assert kinds == ["real", "generated", "real"]


def test_gradual_equals_ours_at_unit_alpha(workspace: Path):
    _invoke(
        workspace,
        "run", "--manifest", "data/manifest.json", "--checkpoint", "flow/flow.ckpt",
        "--method", "ours", "--method", "gradual", "--alpha", "1.0", "--out-dir", "unit",
    )
    ours, gradual = _report(workspace / "unit" / "report.csv")
    for column in ("target_accuracy", "cycle_loss", "cycle_accuracy", "adjacent_max_w2"):
        assert ours[column] == gradual[column]


def test_run_append_and_timings(workspace: Path):
    args = ("run", "--manifest", "data/manifest.json", "--method", "source-only")
    _invoke(workspace, *args, "--out-dir", "appended")
    _invoke(workspace, *args, "--seeds", "1,2", "--append", "--record-timings", "--out-dir", "appended")
    rows = _report(workspace / "appended" / "report.csv")
    assert [r["seed"] for r in rows] == ["0", "1", "2"]
    assert rows[0]["wallclock_s"] == "" and float(rows[2]["wallclock_s"]) >= 0


def test_ours_needs_a_checkpoint(workspace: Path):
    result = _invoke(
        workspace, "run", "--manifest", "data/manifest.json", "--method", "ours", expect=2
    )
    assert "--checkpoint" in result.output


def test_select_alpha(workspace: Path):
    result = _invoke(
        workspace,
        "select-alpha", "--manifest", "data/manifest.json", "--checkpoint", "flow/flow.ckpt",
        "--grid", "1.0,0.5,0.5", "--out-dir", "select",
    )
    assert "best_alpha=" in result.output
    assert "duplicate alpha" in result.output
    rows = _report(workspace / "select" / "cycle_reports.csv")
    assert [r["alpha"] for r in rows] == ["0.5", "1"]
    assert all(r["status"] == "ok" for r in rows)


def test_select_alpha_rejects_alpha_beyond_horizon(workspace: Path):
    result = _invoke(
        workspace,
        "select-alpha", "--manifest", "data/manifest.json", "--checkpoint", "flow/flow.ckpt",
        "--grid", "3.0", "--out-dir", "select_bad", expect=2,
    )
    assert "INVALID_INPUT" in result.output


def test_generate(workspace: Path):
    _invoke(
        workspace,
        "generate", "--checkpoint", "flow/flow.ckpt", "--time-index", "1.5", "--n", "7",
        "--seed", "3", "--output", "gen/pseudo.csv",
    )
    dataset = load_dataset(workspace / "gen" / "pseudo.csv")
    assert isinstance(dataset, UnlabeledDataset)
    assert dataset.n == 7 and dataset.time_index == 1.5


def test_diagnose(workspace: Path):
    result = _invoke(
        workspace,
        "diagnose", "--manifest", "data/manifest.json", "--checkpoint", "flow/flow.ckpt",
        "--alpha", "0.5", "--out-dir", "diag",
    )
    assert "max_w2=" in result.output
    rows = _report(workspace / "diag" / "diagnose_alpha0p5.csv")
    assert [(r["kind_from"], r["kind_to"]) for r in rows] == [
        ("real", "generated"),
        ("generated", "real"),
    ]


def test_bad_angles_are_a_usage_error(workspace: Path):
    _invoke(workspace, "make-data", "two-moons", "--angles", "0,abc", expect=2)


def test_missing_manifest_file(workspace: Path):
    _invoke(workspace, "train-flow", "--manifest", "absent.json", expect=2)


def test_run_is_byte_identical_on_rerun(workspace: Path):
    for out in ("rerun_a", "rerun_b"):
        _invoke(
            workspace,
            "run", "--manifest", "data/manifest.json", "--checkpoint", "flow/flow.ckpt",
            "--method", "ours", "--method", "gradual", "--alpha", "0.5", "--out-dir", out,
        )
    first = (workspace / "rerun_a" / "report.csv").read_bytes()
    assert first == (workspace / "rerun_b" / "report.csv").read_bytes()


def test_one_out_dir_holds_a_whole_experiment(workspace: Path):
    _invoke(
        workspace,
        "make-data", "two-moons", "--angles", "0,30", "--n", "20",
        "--noise-sd", "0.05", "--seed", "1", "--out-dir", "shared",
    )
    _invoke(workspace, "train-flow", "--manifest", "shared/manifest.json", "--out-dir", "shared")
    _invoke(
        workspace,
        "run", "--manifest", "shared/manifest.json", "--checkpoint", "shared/flow.ckpt",
        "--alpha", "0.5", "--out-dir", "shared",
    )
    sequence_manifest = json.loads((workspace / "shared" / "manifest.json").read_text())
    assert [d["time_index"] for d in sequence_manifest["domains"]] == [1.0, 2.0]
    run_manifest = json.loads((workspace / "shared" / "run_manifest.json").read_text())
    assert run_manifest["command"] == "run"


def test_manifest_falls_back_to_config(workspace: Path):
    config = workspace / "with_manifest.yaml"
    manifest = (workspace / "data" / "manifest.json").as_posix()
    config.write_text(TINY_CONFIG + f"data:\n  manifest: {manifest}\n", encoding="utf-8")
    result = CliRunner().invoke(
        cli, ["--config", str(config), "diagnose", "--alpha", "1.0", "--out-dir", "from_config"]
    )
    assert result.exit_code == 0, result.output
    assert "max_w2=" in result.output


def test_manifest_is_required_without_config_default(workspace: Path):
    result = _invoke(workspace, "diagnose", "--out-dir", "no_manifest", expect=2)
    assert "--manifest" in result.output
