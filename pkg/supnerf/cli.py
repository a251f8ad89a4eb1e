"""CLI for supnerf: synthetic data, training, inference, evaluation and ablations."""

from __future__ import annotations

import logging
import sys
from pathlib import Path
from typing import Annotated, Any, get_args

import click
import typer
from pydantic import BaseModel

from config import GRADCHECK_REPORT_PATH
from supnerf.errors import SupNerfError
from supnerf.gradengine import set_finite_checks
from supnerf.log import setup_logging, stderr_console
from supnerf.settings import CodeSource, PoseFrame, PoseModule, RunConfig, load_run_config

log = logging.getLogger(__name__)

app = typer.Typer(
    help="Iterative object pose refinement with a conditional object NeRF", no_args_is_help=True
)
ablate_app = typer.Typer(help="NGPR-only ablations from injected pose errors", no_args_is_help=True)
app.add_typer(ablate_app, name="ablate")
console = stderr_console

ConfigOpt = Annotated[
    Path | None,
    typer.Option("--config", help="Flat-key JSON/YAML config file", exists=True, dir_okay=False),
]
SeedOpt = Annotated[int | None, typer.Option(help="Seed for every random source")]
ThreadsOpt = Annotated[int | None, typer.Option(help="Worker threads (default SUPNERF_THREADS)")]
DataOpt = Annotated[Path, typer.Option(help="Dataset pack directory", exists=True, file_okay=False)]
CkptOpt = Annotated[Path, typer.Option(help="Trained checkpoint", exists=True, dir_okay=False)]


def _choice(literal: Any) -> click.Choice:
    return click.Choice(list(get_args(literal)))


def _config(path: Path | None, **overrides: Any) -> RunConfig:
    cfg = load_run_config(path, overrides)
    set_finite_checks(cfg.debug)
    return cfg


VerboseOpt = Annotated[bool, typer.Option("--verbose", "-v", help="Debug logging")]


@app.callback()
def _main(verbose: VerboseOpt = False) -> None:
    if verbose:
        setup_logging("DEBUG")


@app.command()
def gen(
    out: Annotated[Path, typer.Option(help="Output pack directory")],
    objects: Annotated[int, typer.Option(help="Number of objects")],
    views: Annotated[int, typer.Option(help="Views per object")],
    seed: Annotated[int, typer.Option(help="Generation seed")],
    threads: ThreadsOpt = None,
    config: ConfigOpt = None,
) -> None:
    """Generate a synthetic dataset pack."""
    from supnerf.log import log_duration
    from supnerf.synthdata import generate_pack

    cfg = _config(config, objects=objects, views=views, seed=seed, threads=threads)
    console.print(f"[bold blue]Generating {objects}×{views} frames into {out}...[/bold blue]")
    with log_duration(log, "generate pack"):
        manifest = generate_pack(cfg.synth, out, cfg.threads, cfg.echo())
    console.print(f"[bold green]Wrote {len(manifest.frames)} frames[/bold green]")


@app.command()
def train(
    data: DataOpt,
    out: Annotated[Path, typer.Option(help="Run directory for checkpoint and loss log")],
    epochs: Annotated[int | None, typer.Option(help="Training epochs")] = None,
    lr: Annotated[float | None, typer.Option(help="Learning rate")] = None,
    seed: SeedOpt = None,
    batch_size: Annotated[int | None, typer.Option(help="Records per gradient step")] = None,
    pose_module: Annotated[
        str | None, typer.Option(click_type=_choice(PoseModule), help="Pose head")
    ] = None,
    config: ConfigOpt = None,
) -> None:
    """Train encoder, decoder and pose module jointly."""
    from supnerf.training import train as run_train

    cfg = _config(
        config, epochs=epochs, lr=lr, seed=seed, batch_size=batch_size, pose_module=pose_module
    )
    console.print(f"[bold blue]Training on {data} for {cfg.train.epochs} epochs...[/bold blue]")
    result = run_train(data, cfg, out)
    last = result.log.epochs[-1]
    console.print(
        f"[bold green]Checkpoint {result.checkpoint} (final loss {last.total:.5f})[/bold green]"
    )


@app.command()
def infer(
    data: DataOpt,
    ckpt: CkptOpt,
    out: Annotated[Path, typer.Option(help="Results directory")],
    ff_iters: Annotated[int | None, typer.Option(help="Feed-forward refiner iterations")] = None,
    nerf_iters: Annotated[int | None, typer.Option(help="NGPR iterations")] = None,
    pose_frame: Annotated[
        str | None, typer.Option(click_type=_choice(PoseFrame), help="NGPR pose frame")
    ] = None,
    freeze_pose: Annotated[bool | None, typer.Option("--freeze-pose/--no-freeze-pose")] = None,
    freeze_dims: Annotated[bool | None, typer.Option("--freeze-dims/--no-freeze-dims")] = None,
    cross_view: Annotated[bool | None, typer.Option("--cross-view/--no-cross-view")] = None,
    dump_renders: Annotated[bool | None, typer.Option("--dump-renders/--no-dump-renders")] = None,
    seed: SeedOpt = None,
    threads: ThreadsOpt = None,
    config: ConfigOpt = None,
) -> None:
    """Feed-forward refinement then NGPR on every record of a pack."""
    from supnerf.inference import infer as run_infer

    cfg = _config(
        config, ff_iters=ff_iters, nerf_iters=nerf_iters, pose_frame=pose_frame,
        freeze_pose=freeze_pose, freeze_dims=freeze_dims, cross_view=cross_view,
        dump_renders=dump_renders, seed=seed, threads=threads,
    )
    result = run_infer(data, ckpt, cfg, out)
    summary = result.summary(cfg.infer.report_iters)
    console.print(
        f"[bold green]{summary.records} records ({summary.failed} failed); "
        f"median final RE {_fmt(summary.final.get('re'))}°, "
        f"TE {_fmt(summary.final.get('te'))} m[/bold green]"
    )


class EvalReport(BaseModel):
    echo: dict[str, Any] = {}
    stages: list[dict[str, Any]]
    final: dict[str, Any]
    cross_view: dict[str, Any] | None = None


def _fmt(value: Any) -> str:
    if value is None:
        return ""
    return f"{value:.6g}" if isinstance(value, float) else str(value)


@app.command("eval")
def evaluate(
    results: Annotated[
        Path,
        typer.Option(help="Results directory from infer or ablate", exists=True, file_okay=False),
    ],
    out: Annotated[Path, typer.Option(help="Evaluation report (JSON)")],
    cross_view: Annotated[
        bool, typer.Option("--cross-view", help="Aggregate cross-view scores")
    ] = False,
) -> None:
    """Aggregate result curves; prints a TSV table to stdout."""
    from supnerf.db import cross_view_means, final_medians, get_conn, stage_medians
    from supnerf.results import ExperimentSummary

    curves = results / "curves.csv"
    if not curves.exists():
        raise SupNerfError(f"{curves} not found")
    echo: dict[str, Any] = {}
    summary_path = results / "summary.json"
    if summary_path.exists():
        echo = ExperimentSummary.model_validate_json(summary_path.read_text(encoding="utf-8")).echo

    with get_conn() as conn:
        stages = stage_medians(conn, curves)
        final = final_medians(conn, curves)
        cross = cross_view_means(conn, results / "records.csv") if cross_view else None

    columns = ["stage", "iter", "n", "psnr", "de", "re", "te", "loss"]
    typer.echo("\t".join(columns))
    for row in stages:
        typer.echo("\t".join(_fmt(row.get(c)) for c in columns))
    if cross is not None:
        typer.echo("\t".join(["cross_view", "n", "psnr_cross", "de_cross"]))
        values = [_fmt(cross.get(c)) for c in ("n", "psnr_cross", "de_cross")]
        typer.echo("\t".join(["", *values]))

    report = EvalReport(echo=echo, stages=stages, final=final, cross_view=cross)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.model_dump_json(indent=2), encoding="utf-8")


def _ablate(
    which: str, data: Path, ckpt: Path, out: Path, config: Path | None, **overrides: Any
) -> None:
    from supnerf.experiments import run_experiment
    from supnerf.inference import load_model

    cfg = _config(config, **overrides)
    model = load_model(ckpt, cfg)
    rep = run_experiment(which, model, data, cfg, out)
    colour = "green" if rep.passed else "yellow"
    passed = sum(c.passed for c in rep.checks)
    console.print(
        f"[bold {colour}]{which}: {passed}/{len(rep.checks)} checks passed[/bold {colour}]"
    )


OutOpt = Annotated[Path, typer.Option(help="Ablation output directory")]
MaxRecordsOpt = Annotated[int | None, typer.Option(help="Records to use")]
CodeSourceOpt = Annotated[
    str | None, typer.Option(click_type=_choice(CodeSource), help="Where codes come from")
]
NerfItersOpt = Annotated[int | None, typer.Option(help="NGPR iterations per arm")]


@ablate_app.command("frame")
def ablate_frame(
    data: DataOpt, ckpt: CkptOpt, out: OutOpt,
    max_records: MaxRecordsOpt = None, code_source: CodeSourceOpt = None,
    nerf_iters: NerfItersOpt = None, threads: ThreadsOpt = None, config: ConfigOpt = None,
) -> None:
    """O2C-relative vs C2O pose parameterization."""
    _ablate("frame", data, ckpt, out, config, max_records=max_records,
            code_source=code_source, nerf_iters=nerf_iters, threads=threads)


@ablate_app.command("ambiguity")
def ablate_ambiguity(
    data: DataOpt, ckpt: CkptOpt, out: OutOpt,
    max_records: MaxRecordsOpt = None, code_source: CodeSourceOpt = None,
    nerf_iters: NerfItersOpt = None, threads: ThreadsOpt = None, config: ConfigOpt = None,
) -> None:
    """Free scale vs frozen dimensions from a scaled depth."""
    _ablate("ambiguity", data, ckpt, out, config, max_records=max_records,
            code_source=code_source, nerf_iters=nerf_iters, threads=threads)


@ablate_app.command("sweep")
def ablate_sweep(
    data: DataOpt, ckpt: CkptOpt, out: OutOpt,
    max_records: MaxRecordsOpt = None, code_source: CodeSourceOpt = None,
    nerf_iters: NerfItersOpt = None, threads: ThreadsOpt = None, config: ConfigOpt = None,
) -> None:
    """Rotation × depth initial-error sweep."""
    _ablate("sweep", data, ckpt, out, config, max_records=max_records,
            code_source=code_source, nerf_iters=nerf_iters, threads=threads)


@app.command()
def gradcheck(
    tol: Annotated[float, typer.Option(help="Relative tolerance for primitives")] = 1e-6,
    out: Annotated[Path, typer.Option(help="Report path")] = GRADCHECK_REPORT_PATH,
    seed: Annotated[int, typer.Option(help="Input seed")] = 0,
) -> None:
    """Check every autodiff primitive and the inference loss against finite differences."""
    from supnerf.gradsuite import run_suite

    cfg = _config(None)
    console.print("[bold blue]Running gradient checks...[/bold blue]")
    report = run_suite(tol=tol, seed=seed, echo=cfg.echo())
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.model_dump_json(indent=2), encoding="utf-8")
    if not report.passed:
        failed = [name for name, r in report.cases.items() if not r.passed]
        raise SupNerfError(f"gradient check failed: {', '.join(failed)} (report in {out})")
    console.print(f"[bold green]{len(report.cases)} gradient checks passed[/bold green]")


def main(argv: list[str] | None = None) -> int:
    """Entry point: 0 on success, 1 on usage errors, 2 on runtime failures."""
    try:
        rv = app(args=argv, prog_name="supnerf", standalone_mode=False)
    except click.ClickException as e:
        e.show(file=sys.stderr)
        return 1
    except click.Abort:
        return 1
    except (SupNerfError, OSError) as e:
        log.error("%s", e)
        return 2
    return rv if isinstance(rv, int) else 0


if __name__ == "__main__":
    sys.exit(main())
