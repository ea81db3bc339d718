"""Plot-ready CSV artifacts and the run manifest."""

from __future__ import annotations

import json
import os
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Any

from .cnf.train import FlowHistory
from .data import DomainSequence
from .evaluation import accuracy, render_csv
from .interpolate import GdaRun
from .selftrain import CycleReport
from .utils import atomic_write_text, format_float, json_safe_default

HISTORY_COLUMNS = ("epoch", "time_index", "nll", "penalty", "l_all")
TRACE_COLUMNS = (
    "alpha",
    "step_index",
    "time_index",
    "dataset_kind",
    "step_accuracy_if_labeled",
    "cycle_loss",
    "cycle_accuracy",
)
CYCLE_COLUMNS = ("alpha", "status", "forward_target_accuracy", "cycle_loss", "cycle_accuracy")
DISTANCE_COLUMNS = ("time_from", "time_to", "kind_from", "kind_to", "w2")


def write_history(history: FlowHistory, path: str | os.PathLike[str], config_hash: str) -> Path:
    rows = [(r.epoch, r.time_index, r.nll, r.penalty, r.total) for r in history.records]
    return atomic_write_text(path, render_csv(HISTORY_COLUMNS, rows, config_hash))


def trace_rows(
    run: GdaRun, domains: DomainSequence, cycle: CycleReport | None = None
) -> list[tuple[Any, ...]]:
    """One row per walk position; accuracy only where held-out labels exist."""

    rows = []
    for step, model in zip(run.walk, run.chain.in_force(), strict=True):
        labeled = domains.evaluation_dataset(step.time_index) if step.kind == "real" else None
        rows.append(
            (
                run.alpha,
                step.step_index,
                step.time_index,
                step.kind,
                accuracy(model, labeled) if labeled is not None else None,
                cycle.cycle_loss if cycle else None,
                cycle.cycle_accuracy if cycle else None,
            )
        )
    return rows


def write_trace(
    rows: Sequence[Sequence[Any]], path: str | os.PathLike[str], config_hash: str
) -> Path:
    return atomic_write_text(path, render_csv(TRACE_COLUMNS, rows, config_hash))


def write_cycle_reports(
    reports: Sequence[CycleReport],
    failures: Mapping[float, str],
    path: str | os.PathLike[str],
    config_hash: str,
    *,
    pearson_r: float | None = None,
) -> Path:
    rows: list[tuple[Any, ...]] = [
        (r.alpha, "ok", r.forward_target_accuracy, r.cycle_loss, r.cycle_accuracy)
        for r in reports
    ]
    rows.extend(
        (alpha, f"failed: {message}", None, None, None) for alpha, message in failures.items()
    )
    rows.sort(key=lambda row: row[0])
    text = render_csv(CYCLE_COLUMNS, rows, config_hash)
    if pearson_r is not None:
        text += f"# pearson_r={format_float(pearson_r)}\n"
    return atomic_write_text(path, text)


def write_distances(
    rows: Sequence[Sequence[Any]], path: str | os.PathLike[str], config_hash: str
) -> Path:
    return atomic_write_text(path, render_csv(DISTANCE_COLUMNS, rows, config_hash))


# distinct from the sequence manifest so one --out-dir can hold a whole experiment
RUN_MANIFEST = "run_manifest.json"


def write_run_manifest(payload: Mapping[str, Any], path: str | os.PathLike[str]) -> Path:
    text = json.dumps(payload, indent=2, sort_keys=True, default=json_safe_default)
    return atomic_write_text(path, text + "\n")


def walk_provenance(run: GdaRun) -> list[dict[str, Any]]:
    return [
        {
            "step_index": step.step_index,
            "time_index": step.time_index,
            "kind": step.kind,
            "n": step.dataset.n,
            "seed": step.seed,
        }
        for step in run.walk
    ]


__all__ = [
    "CYCLE_COLUMNS",
    "DISTANCE_COLUMNS",
    "HISTORY_COLUMNS",
    "TRACE_COLUMNS",
    "trace_rows",
    "walk_provenance",
    "write_cycle_reports",
    "write_distances",
    "write_history",
    "RUN_MANIFEST",
    "write_run_manifest",
    "write_trace",
]
