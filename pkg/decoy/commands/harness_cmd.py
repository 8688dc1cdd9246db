"""Run config-driven experiments, rotate patterns and read reports."""

from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import typer
from rich import box
from rich.table import Table

from decoy.commands.common import console, guarded, require, state
from decoy.formats import load_vulns, save_pattern
from decoy.harness import (
    CSV,
    JSONL,
    Report,
    emit_report,
    load_artifacts,
    load_report,
    prepare,
    rotate,
    run_trials,
    save_artifacts,
)
from decoy.image import load_image, save_image

app = typer.Typer(no_args_is_help=True)


def _fmt(value: Optional[dict], key: str = "mean") -> str:
    return "—" if not value else f"{value[key]:.4f}"


def _aggregates_table(rep: Report, title: str) -> Table:
    table = Table(title=title, box=box.ROUNDED, border_style="green", title_style="bold green")
    table.add_column("Phase", style="bold cyan")
    table.add_column("Trials", justify="right")
    table.add_column("Accuracy", justify="right")
    table.add_column("ASR", justify="right")
    table.add_column("Mitigation", justify="right")
    table.add_column("ΔStorage %", justify="right")
    table.add_column("ΔSteps %", justify="right")
    table.add_column("Outcomes", style="dim")
    for phase, agg in rep.aggregates().items():
        rate = agg.get("mitigation_rate")
        outcomes = ", ".join(f"{k} {v}" for k, v in agg.get("outcomes", {}).items())
        table.add_row(
            phase,
            str(agg["count"]),
            _fmt(agg.get("accuracy")),
            _fmt(agg.get("asr")),
            "—" if rate is None else f"{rate:.0%}",
            _fmt(agg.get("d_storage_pct")),
            _fmt(agg.get("d_steps_pct")),
            outcomes,
        )
    return table


@app.command("run")
def run(
    ctx: typer.Context,
    resume: Optional[Path] = typer.Option(None, "--resume", help="Artifacts directory from an earlier run"),
    trials: Optional[int] = typer.Option(None, "--trials", "-n", help="Override the number of pattern seeds"),
):
    """Run the full pipeline: train, search, attack, defend, replay, adaptive, overhead."""
    require(resume)
    st = state(ctx)
    cfg = st.experiment()
    if trials is not None:
        cfg = replace(cfg, trials=replace(cfg.trials, trials=trials))
    out = Path(cfg.output.dir)
    with guarded():
        if resume is not None:
            art = load_artifacts(resume, cfg)
        else:
            with console.status("[green]Preparing artifacts…[/green]"):
                art = prepare(cfg)
            save_artifacts(art, out / "artifacts")
        with console.status(f"[green]Running {cfg.trials.trials} pattern trials…[/green]"):
            rep = run_trials(cfg, art)
        jsonl = emit_report(rep, out / cfg.output.report, JSONL)
        csv_path = emit_report(rep, out / cfg.output.csv, CSV)

    console.print(_aggregates_table(rep, f"🛡️ {cfg.name} — seed {cfg.seed}"))
    console.print(f"[dim]baseline accuracy {rep.meta['baseline_accuracy']:.4f}[/dim]")
    console.print(f"[green]✓ Report → {jsonl}[/green]")
    console.print(f"[green]✓ CSV → {csv_path}[/green]")


@app.command("rotate")
def rotate_cmd(
    ctx: typer.Context,
    image: Path = typer.Option(..., "--image", "-i", help="Clean image"),
    vulns: List[Path] = typer.Option(..., "--vulns", "-v", help="Vulnerability list(s)"),
    interval: Optional[int] = typer.Option(None, "--interval", help="Requests between regenerations"),
    requests: Optional[int] = typer.Option(None, "--requests", help="Simulated inference requests"),
    instances: Optional[int] = typer.Option(None, "--instances", help="Serving instances, refreshed round-robin"),
    save: bool = typer.Option(False, "--save", help="Write every served image and pattern"),
):
    """Regenerate the obfuscation pattern every N simulated requests."""
    require(image, *vulns)
    st = state(ctx)
    cfg = st.experiment()
    rot = cfg.rotation
    out = Path(cfg.output.dir) / "rotation"
    table = Table(title="🔄 Pattern rotation", box=box.ROUNDED, border_style="green")
    table.add_column("Request", justify="right", style="bold cyan")
    table.add_column("Generation", justify="right")
    table.add_column("Instance", justify="right")
    table.add_column("Image SHA-256", style="dim")
    table.add_column("Bytes", justify="right")
    table.add_column("Seconds", justify="right")
    with guarded():
        img = load_image(image)
        stream = rotate(
            img,
            [load_vulns(v) for v in vulns],
            st.dataset(),
            rot.interval if interval is None else interval,
            rot.requests if requests is None else requests,
            cfg.seed,
            cfg.obfuscation.prob,
            rot.instances if instances is None else instances,
            cfg.obfuscation.max_retries,
            research=cfg.obfuscation.verify,
            layer_share=cfg.obfuscation.layer_share,
            step_budget=cfg.search.step_budget,
        )
        for event in stream:
            table.add_row(
                str(event.request),
                str(event.generation),
                str(event.instance),
                event.image.digest()[:16],
                str(event.image.size),
                f"{event.wall_time:.2f}",
            )
            if save:
                out.mkdir(parents=True, exist_ok=True)
                save_image(event.image, out / f"gen-{event.generation:03d}.barm")
                save_pattern(event.pattern, out / f"gen-{event.generation:03d}.pattern.jsonl")
    console.print(table)
    minutes = (rot.requests if requests is None else requests) / rot.requests_per_minute
    console.print(f"[dim]≈ {minutes:.0f} min of traffic at {rot.requests_per_minute} requests/min[/dim]")
    console.print(f"[green]✓ {table.row_count} regenerations, logits unchanged[/green]")


@app.command("report")
def report(
    file: Path = typer.Argument(..., help="Report file (.jsonl)"),
    csv_out: Optional[Path] = typer.Option(None, "--csv", help="Also write the rows as CSV"),
):
    """Summarize a saved report."""
    require(file)
    with guarded():
        rep = load_report(file)
        if csv_out is not None:
            emit_report(rep, csv_out, CSV)

    console.print(_aggregates_table(rep, f"📊 {rep.meta.get('name', file.stem)} — {len(rep.rows)} rows"))
    if csv_out is not None:
        console.print(f"[green]✓ CSV → {csv_out}[/green]")
