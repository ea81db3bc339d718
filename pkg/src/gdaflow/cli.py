"""Command-line entry point: data generation, flow training, adaptation runs and diagnostics."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import click

from ._version import get_version
from .cnf.checkpoint import load_flow, save_flow
from .cnf.flow import FlowModel
from .cnf.train import train_flow
from .config import GdaFlowSettings, RunConfig, config_hash, load_run_config
from .data import (
    DomainSequence,
    blobs_sequence,
    load_sequence_manifest,
    save_dataset,
    save_sequence_manifest,
    two_moons_sequence,
)
from .errors import FlowDivergedError, handle_errors
from .evaluation import ExperimentReport, ExperimentRow, accuracy, emit_report
from .interpolate import (
    GdaRun,
    PseudoDomainCache,
    adjacent_distances,
    build_walk,
    generate_pseudo_domain,
    run_gda,
)
from .observability import configure_logging, operation_logger
from .reports import (
    RUN_MANIFEST,
    trace_rows,
    walk_provenance,
    write_cycle_reports,
    write_distances,
    write_history,
    write_run_manifest,
    write_trace,
)
from .selftrain import CycleReport, cycle_consistency, dedupe_alphas, select_alpha, source_only
from .utils import derive_seed, format_float

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CliState:
    settings: GdaFlowSettings
    config_file: str | None


def _float_list(ctx: click.Context, param: click.Parameter, value: str | None) -> Any:
    if value is None:
        return None
    try:
        values = tuple(float(part) for part in value.split(",") if part.strip())
    except ValueError:
        raise click.BadParameter("expected comma-separated numbers") from None
    if not values or not all(math.isfinite(v) for v in values):
        raise click.BadParameter("expected at least one finite number")
    return values


def _int_list(ctx: click.Context, param: click.Parameter, value: str | None) -> Any:
    if value is None:
        return None
    try:
        return tuple(int(part) for part in value.split(",") if part.strip())
    except ValueError:
        raise click.BadParameter("expected comma-separated integers") from None


def _state(ctx: click.Context) -> CliState:
    state = ctx.find_object(CliState)
    if state is None:
        state = CliState(settings=GdaFlowSettings(), config_file=None)
    return state


def _config(ctx: click.Context, overrides: dict[str, Any]) -> RunConfig:
    return load_run_config(_state(ctx).config_file, overrides)


def _out_dir(ctx: click.Context, out_dir: str | None, *parts: str) -> Path:
    root = Path(out_dir) if out_dir else Path(_state(ctx).settings.out_dir).joinpath(*parts)
    root.mkdir(parents=True, exist_ok=True)
    return root


def _generated_sequence(config: RunConfig) -> DomainSequence:
    data = config.data
    if data.generator == "blobs":
        return blobs_sequence(
            data.n,
            data.class_count,
            data.noise_sd,
            data.angles_deg,
            config.seed,
            shared_cloud=data.shared_cloud,
        )
    return two_moons_sequence(
        data.n, data.noise_sd, data.angles_deg, config.seed, shared_cloud=data.shared_cloud
    )


def _label(value: float) -> str:
    return format_float(value).replace(".", "p")


_MANIFEST_HELP = "Sequence manifest (defaults to data.manifest in the config file)"


def _manifest(config: RunConfig, manifest: str | None) -> str:
    path = manifest or config.data.manifest
    if path is None:
        raise click.UsageError("--manifest is required unless the config sets data.manifest")
    return path


@click.group()
@click.option("--log-level", default=None, help="Override GDAFLOW_LOG_LEVEL (e.g. DEBUG)")
@click.option(
    "--config",
    "config_file",
    type=click.Path(dir_okay=False),
    default=None,
    help="YAML run configuration (defaults to GDAFLOW_CONFIG_FILE)",
)
@click.version_option(get_version(), prog_name="gdaflow")
@click.pass_context
def cli(ctx: click.Context, log_level: str | None, config_file: str | None) -> None:
    """Gradual domain adaptation through flow-generated intermediate domains."""

    settings = GdaFlowSettings()
    configure_logging(log_level or settings.log_level, settings.log_file)
    ctx.obj = CliState(settings=settings, config_file=config_file or settings.config_file)


@cli.command("make-data")
@click.argument("generator", type=click.Choice(["two-moons", "blobs"]))
@click.option("--angles", required=True, callback=_float_list, help="Degrees, e.g. 0,40,80")
@click.option("--n", "n", type=int, default=None, help="Samples per domain")
@click.option("--noise-sd", type=float, default=None, help="Noise (two-moons) or spread (blobs)")
@click.option("--class-count", type=int, default=None, help="Classes (blobs only)")
@click.option("--seed", type=int, default=None)
@click.option("--shared-cloud", is_flag=True, default=None, help="Rotate one point cloud")
@click.option("--out-dir", type=click.Path(file_okay=False), default=None)
@click.pass_context
@handle_errors
def make_data(
    ctx: click.Context,
    generator: str,
    angles: tuple[float, ...],
    n: int | None,
    noise_sd: float | None,
    class_count: int | None,
    seed: int | None,
    shared_cloud: bool | None,
    out_dir: str | None,
) -> None:
    """Write one CSV per rotated domain plus manifest.json."""

    config = _config(
        ctx,
        {
            "seed": seed,
            "data": {
                "generator": generator,
                "angles_deg": angles,
                "n": n,
                "noise_sd": noise_sd,
                "class_count": class_count,
                "shared_cloud": shared_cloud,
            },
        },
    )
    target = _out_dir(ctx, out_dir, "data")
    with operation_logger("make_data", generator=generator, domains=len(angles)) as op:
        sequence = _generated_sequence(config)
        manifest = save_sequence_manifest(sequence, target)
        for k in range(len(sequence.time_indices)):
            click.echo(str(target / f"domain_{k + 1}.csv"))
        click.echo(str(manifest))
        op.success({"manifest": manifest, "config_hash": config_hash(config)})


@cli.command("train-flow")
@click.option("--manifest", type=click.Path(exists=True), default=None, help=_MANIFEST_HELP)
@click.option("--gamma", type=float, default=None, help="Trajectory penalty weight (default 5.0)")
@click.option("--m", "m", type=int, default=None, help="Time points per trajectory (default 4)")
@click.option("--steps-per-unit-time", type=int, default=None)
@click.option("--block-count", type=int, default=None)
@click.option("--hidden", default=None, callback=_int_list, help="Hidden widths, e.g. 64,64")
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out-dir", type=click.Path(file_okay=False), default=None)
@click.pass_context
@handle_errors
def train_flow_command(
    ctx: click.Context,
    manifest: str | None,
    gamma: float | None,
    m: int | None,
    steps_per_unit_time: int | None,
    block_count: int | None,
    hidden: tuple[int, ...] | None,
    epochs: int | None,
    batch_size: int | None,
    lr: float | None,
    seed: int | None,
    out_dir: str | None,
) -> None:
    """Fit the flow jointly over every domain; writes flow.ckpt and history.csv."""

    config = _config(
        ctx,
        {
            "seed": seed,
            "flow": {
                "gamma": gamma,
                "m": m,
                "steps_per_unit_time": steps_per_unit_time,
                "block_count": block_count,
                "hidden": hidden,
                "epochs": epochs,
                "batch_size": batch_size,
                "lr": lr,
                "seed": seed,
            },
        },
    )
    digest = config_hash(config)
    target = _out_dir(ctx, out_dir)
    manifest = _manifest(config, manifest)
    sequence = load_sequence_manifest(manifest).training_view()
    with operation_logger("train_flow_command", manifest=manifest, config_hash=digest) as op:
        try:
            flow = train_flow(sequence, config.flow.gamma, config.flow.m, config.flow)
        except FlowDivergedError as exc:
            write_history(exc.history, target / "history.csv", digest)
            raise
        assert flow.history is not None
        checkpoint = save_flow(flow, target / "flow.ckpt")
        history = write_history(flow.history, target / "history.csv", digest)
        write_run_manifest(
            {
                "command": "train-flow",
                "config_hash": digest,
                "config": config,
                "sequence_manifest": str(Path(manifest).resolve()),
                "K": flow.horizon,
                "T": list(flow.time_indices),
                "flow_checkpoint": str(checkpoint),
            },
            target / RUN_MANIFEST,
        )
        click.echo(str(checkpoint))
        click.echo(str(history))
        op.success({"checkpoint": checkpoint, "final_l_all": flow.history.epoch_totals()[-1]})


def _adjacent_max(run: GdaRun, seed: int) -> float | None:
    datasets = run.cycle_walk("symmetric")
    if len(datasets) < 2:
        return None
    return max(w2 for _, _, w2 in adjacent_distances(datasets, derive_seed(seed, "diagnose")))


def _cycle(run: GdaRun, sequence: DomainSequence, config: RunConfig) -> CycleReport:
    return cycle_consistency(
        run.classifier,
        run.cycle_walk(config.reverse_mode),
        sequence.source,
        config.classifier,
        seed=derive_seed(config.seed, "cycle", run.alpha),
        alpha=run.alpha,
        target=sequence.target_evaluation(),
    )


@cli.command("run")
@click.option("--manifest", type=click.Path(exists=True), default=None, help=_MANIFEST_HELP)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option(
    "--method",
    "methods",
    type=click.Choice(["ours", "gradual", "source-only"]),
    multiple=True,
    default=("ours",),
    show_default=True,
)
@click.option("--alpha", type=float, default=None, help="Fixed alpha; omit to select by cycle loss")
@click.option("--seeds", callback=_int_list, default=None, help="Comma-separated run seeds")
@click.option("--n-generate", type=int, default=None)
@click.option("--append", is_flag=True, default=False, help="Append rows to an existing report")
@click.option("--record-timings", is_flag=True, default=False, help="Fill wallclock_s")
@click.option("--out-dir", type=click.Path(file_okay=False), default=None)
@click.pass_context
@handle_errors
def run_command(
    ctx: click.Context,
    manifest: str | None,
    checkpoint: str | None,
    methods: tuple[str, ...],
    alpha: float | None,
    seeds: tuple[int, ...] | None,
    n_generate: int | None,
    append: bool,
    record_timings: bool,
    out_dir: str | None,
) -> None:
    """Adapt to the target with one or more methods; writes report.csv and trace/."""

    if "ours" in methods and checkpoint is None:
        raise click.UsageError("--method ours needs --checkpoint")
    if methods == ("source-only",) and (checkpoint or alpha is not None):
        logger.warning(
            "flow_args_ignored",
            extra={"event": "flow_args_ignored", "method": "source-only"},
        )
        click.echo("warning: source-only ignores --checkpoint and --alpha", err=True)

    base = _config(ctx, {"n_generate": n_generate})
    digest = config_hash(base)
    target = _out_dir(ctx, out_dir)
    manifest = _manifest(base, manifest)
    sequence = load_sequence_manifest(manifest)
    flow: FlowModel | None = load_flow(checkpoint) if "ours" in methods and checkpoint else None
    report = ExperimentReport()
    provenance: list[dict[str, Any]] = []
    threads = _state(ctx).settings.threads

    with operation_logger("run", methods=list(methods), config_hash=digest) as op:
        for seed in seeds or (base.seed,):
            config = base.model_copy(update={"seed": seed})
            target_eval = sequence.target_evaluation()
            for method in methods:
                started = time.perf_counter()
                if method == "source-only":
                    model = source_only(sequence.source, config.classifier, seed=seed)
                    row_alpha, cycle, w2, walk = None, None, None, None
                    target_acc = accuracy(model, target_eval) if target_eval else None
                else:
                    row_alpha = 1.0 if method == "gradual" else alpha
                    if row_alpha is None:
                        assert flow is not None
                        row_alpha = select_alpha(
                            flow, sequence, config.alphas, config, threads=threads
                        ).best_alpha
                    run = run_gda(
                        sequence.source,
                        sequence.training_view(),
                        flow if method == "ours" else None,
                        row_alpha,
                        config.n_generate,
                        config,
                    )
                    cycle = _cycle(run, sequence, config)
                    target_acc = cycle.forward_target_accuracy
                    w2 = _adjacent_max(run, seed)
                    walk = run
                    name = f"{method}_seed{seed}_alpha{_label(row_alpha)}.csv"
                    write_trace(trace_rows(run, sequence, cycle), target / "trace" / name, digest)
                elapsed = time.perf_counter() - started
                report.add(
                    ExperimentRow(
                        method=method,
                        alpha=row_alpha,
                        seed=seed,
                        target_accuracy=target_acc,
                        cycle_loss=cycle.cycle_loss if cycle else None,
                        cycle_accuracy=cycle.cycle_accuracy if cycle else None,
                        adjacent_max_w2=w2,
                        wallclock_s=elapsed if record_timings else None,
                    )
                )
                provenance.append(
                    {
                        "method": method,
                        "seed": seed,
                        "alpha": row_alpha,
                        "steps": walk_provenance(walk) if walk else [],
                    }
                )

        report_path = emit_report(report, target / "report.csv", config_hash=digest, append=append)
        write_run_manifest(
            {
                "command": "run",
                "config_hash": digest,
                "config": base,
                "sequence_manifest": str(Path(manifest).resolve()),
                "flow_checkpoint": str(Path(checkpoint).resolve()) if checkpoint else None,
                "K": sequence.horizon,
                "T": list(sequence.time_indices),
                "runs": provenance,
            },
            target / RUN_MANIFEST,
        )
        click.echo(str(report_path))
        op.success({"rows": len(report.rows), "report": report_path})


@cli.command("select-alpha")
@click.option("--manifest", type=click.Path(exists=True), default=None, help=_MANIFEST_HELP)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--grid", callback=_float_list, default=None, help="Candidates, e.g. 0.25,0.5,1")
@click.option("--threads", type=int, default=None, help="Override GDAFLOW_THREADS")
@click.option("--seed", type=int, default=None)
@click.option("--out-dir", type=click.Path(file_okay=False), default=None)
@click.pass_context
@handle_errors
def select_alpha_command(
    ctx: click.Context,
    manifest: str | None,
    checkpoint: str,
    grid: tuple[float, ...] | None,
    threads: int | None,
    seed: int | None,
    out_dir: str | None,
) -> None:
    """Pick the alpha with the lowest cycle-consistency loss."""

    config = _config(ctx, {"seed": seed, "alphas": grid})
    digest = config_hash(config)
    if len(dedupe_alphas(config.alphas)) < len(config.alphas):
        click.echo("warning: duplicate alpha values removed from the grid", err=True)
    target = _out_dir(ctx, out_dir)
    manifest = _manifest(config, manifest)
    sequence = load_sequence_manifest(manifest)
    flow = load_flow(checkpoint)
    workers = threads or _state(ctx).settings.threads
    selection = select_alpha(flow, sequence, config.alphas, config, threads=workers)
    best = next(r for r in selection.reports if r.alpha == selection.best_alpha)
    path = write_cycle_reports(
        selection.reports,
        selection.failures,
        target / "cycle_reports.csv",
        digest,
        pearson_r=selection.pearson_r,
    )
    click.echo(f"best_alpha={format_float(selection.best_alpha)}")
    click.echo(f"cycle_loss={format_float(best.cycle_loss)}")
    if selection.pearson_r is not None:
        click.echo(f"pearson_r={format_float(selection.pearson_r)}")
    click.echo(str(path))


@cli.command("generate")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--time-index", type=float, required=True)
@click.option("--n", "n", type=int, default=400, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--output", type=click.Path(dir_okay=False), required=True)
@click.pass_context
@handle_errors
def generate(
    ctx: click.Context, checkpoint: str, time_index: float, n: int, seed: int, output: str
) -> None:
    """Sample a pseudo-domain at TIME_INDEX and write it as a dataset CSV."""

    flow = load_flow(checkpoint)
    with operation_logger("generate", time_index=time_index, n=n) as op:
        domain = generate_pseudo_domain(flow, time_index, n, seed)
        path = save_dataset(domain.as_unlabeled(), output)
        click.echo(str(path))
        op.success({"output": path})


@cli.command("diagnose")
@click.option("--manifest", type=click.Path(exists=True), default=None, help=_MANIFEST_HELP)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--alpha", type=float, default=1.0, show_default=True)
@click.option("--n-generate", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out-dir", type=click.Path(file_okay=False), default=None)
@click.pass_context
@handle_errors
def diagnose(
    ctx: click.Context,
    manifest: str | None,
    checkpoint: str | None,
    alpha: float,
    n_generate: int | None,
    seed: int | None,
    out_dir: str | None,
) -> None:
    """Exact W2 between adjacent domains of the densified walk."""

    config = _config(ctx, {"seed": seed, "n_generate": n_generate})
    digest = config_hash(config)
    target = _out_dir(ctx, out_dir)
    manifest = _manifest(config, manifest)
    sequence = load_sequence_manifest(manifest).training_view()
    flow = load_flow(checkpoint) if checkpoint else None
    size = config.n_generate or sequence.mean_size()
    walk = build_walk(sequence, flow, alpha, size, config.seed, cache=PseudoDomainCache())
    distances = adjacent_distances(
        [step.dataset for step in walk], derive_seed(config.seed, "diagnose")
    )
    kinds = [step.kind for step in walk]
    rows = [
        (t_a, t_b, kinds[k], kinds[k + 1], w2) for k, (t_a, t_b, w2) in enumerate(distances)
    ]
    for t_a, t_b, kind_a, kind_b, w2 in rows:
        click.echo(
            f"{format_float(t_a)} ({kind_a}) -> {format_float(t_b)} ({kind_b}): "
            f"w2={format_float(w2)}"
        )
    if rows:
        click.echo(f"max_w2={format_float(max(r[-1] for r in rows))}")
    path = write_distances(rows, target / f"diagnose_alpha{_label(alpha)}.csv", digest)
    click.echo(str(path))


__all__ = ["cli"]
