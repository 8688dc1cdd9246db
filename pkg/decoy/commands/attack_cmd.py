"""Simulate bit-flip attackers and replay their flips."""

from pathlib import Path
from typing import List, Optional

import typer
from rich import box
from rich.panel import Panel
from rich.table import Table

from decoy.attack import (
    CODE_LEVEL,
    MODEL_LEVEL,
    AttackRecord,
    adaptive_sweep,
    code_attack,
    replay,
    targeted_bfa,
    untargeted_bfa,
)
from decoy.commands.common import console, guarded, require, state
from decoy.engine import Outcome
from decoy.formats import load_record, load_vulns, save_record
from decoy.image import load_image
from decoy.rng import derive_seed

app = typer.Typer(no_args_is_help=True)


def _summary(rec: AttackRecord, path: Path) -> None:
    metric = "ASR" if rec.targeted else "accuracy"
    console.print(
        Panel(
            f"{len(rec.flips)} / {rec.budget} flips · {metric} "
            f"[bold white]{rec.baseline:.4f} → {rec.achieved:.4f}[/bold white]\n"
            f"[dim]{' '.join(str(a) for a in rec.flips[:12])}{' …' if len(rec.flips) > 12 else ''}[/dim]",
            title=f"⚡ {rec.mode.capitalize()} attack",
            border_style="green",
            box=box.ROUNDED,
        )
    )
    console.print(f"[green]✓ Record → {path}[/green]")


@app.command("untargeted")
def untargeted(
    ctx: typer.Context,
    image: Path = typer.Option(..., "--image", "-i", help="Image file"),
    budget: Optional[int] = typer.Option(None, "--budget", "-b", help="Maximum flips"),
    output: Optional[Path] = typer.Option(None, "--output", "-o", help="Attack record (.jsonl)"),
):
    """Progressive gradient-guided MSB flips until accuracy collapses."""
    require(image)
    st = state(ctx)
    cfg = st.experiment()
    path = st.output("attack-untargeted.jsonl", output)
    a = cfg.attack
    with guarded():
        rec = untargeted_bfa(
            load_image(image),
            st.dataset(),
            a.budget if budget is None else budget,
            a.stop_acc,
            derive_seed(cfg.seed, "attack"),
            a.pool,
        )
        save_record(rec, path)
    _summary(rec, path)


@app.command("targeted")
def targeted(
    ctx: typer.Context,
    image: Path = typer.Option(..., "--image", "-i", help="Image file"),
    source: Optional[int] = typer.Option(None, "--source", "-s", help="Class to misclassify"),
    target: Optional[int] = typer.Option(None, "--target", "-t", help="Class to push it to"),
    budget: Optional[int] = typer.Option(None, "--budget", "-b", help="Maximum flips"),
    output: Optional[Path] = typer.Option(None, "--output", "-o", help="Attack record (.jsonl)"),
):
    """Greedy final-layer flips that send one class to another."""
    require(image)
    st = state(ctx)
    cfg = st.experiment()
    path = st.output("attack-targeted.jsonl", output)
    a = cfg.attack
    with guarded():
        try:
            rec = targeted_bfa(
                load_image(image),
                st.dataset(),
                a.source if source is None else source,
                a.target if target is None else target,
                a.targeted_budget if budget is None else budget,
                derive_seed(cfg.seed, "targeted"),
                a.lam,
            )
        except ValueError as exc:
            console.print(f"[red]✗ {exc}[/red]")
            raise typer.Exit(1)
        save_record(rec, path)
    _summary(rec, path)


@app.command("code")
def code(
    ctx: typer.Context,
    image: Path = typer.Option(..., "--image", "-i", help="Image file with a CODE section"),
    vulns: Path = typer.Option(..., "--vulns", "-v", help="Code vulnerability list"),
    budget: Optional[int] = typer.Option(None, "--budget", "-b", help="Jumps to flip"),
    output: Optional[Path] = typer.Option(None, "--output", "-o", help="Attack record (.jsonl)"),
):
    """Flip the most damaging conditional jumps found by `decoy search code`."""
    require(image, vulns)
    st = state(ctx)
    cfg = st.experiment()
    path = st.output("attack-code.jsonl", output)
    with guarded():
        rec = code_attack(
            load_image(image),
            load_vulns(vulns),
            st.dataset(),
            cfg.attack.code_budget if budget is None else budget,
            derive_seed(cfg.seed, "code-attack"),
            cfg.search.step_budget,
        )
        save_record(rec, path)
    _summary(rec, path)


@app.command("replay")
def replay_cmd(
    ctx: typer.Context,
    image: Path = typer.Option(..., "--image", "-i", help="Image to attack (clean or obfuscated)"),
    record: Path = typer.Option(..., "--record", "-r", help="Attack record"),
):
    """Flip a record's raw addresses on an image and evaluate it."""
    require(image, record)
    st = state(ctx)
    cfg = st.experiment()
    with guarded():
        rec = load_record(record)
        img = load_image(image)
        result = replay(img, rec, st.dataset(), cfg.search.step_budget)

    report = result.report
    if img.digest() != rec.image_digest:
        console.print("[dim]Image differs from the one the record was made on.[/dim]")
    if result.out_of_range:
        console.print(f"[yellow]⚠ {len(result.out_of_range)} addresses fall outside the image[/yellow]")
    if report.outcome is not Outcome.OK:
        console.print(f"[yellow]⚠ Inference ended in {report.outcome.value} ({report.reason})[/yellow]")
        return
    line = f"accuracy [bold white]{report.accuracy:.4f}[/bold white]"
    if report.asr is not None:
        line += f" · ASR [bold white]{report.asr:.4f}[/bold white]"
    console.print(f"[green]✓ Replayed {len(rec.flips)} flips: {line}[/green]")


@app.command("adaptive")
def adaptive(
    ctx: typer.Context,
    image: Path = typer.Option(..., "--image", "-i", help="Obfuscated image"),
    record: Path = typer.Option(..., "--record", "-r", help="Attack record made on the clean image"),
    level: str = typer.Option(CODE_LEVEL, "--level", "-l", help="code or model"),
    radius: Optional[List[int]] = typer.Option(None, "--radius", help="x1 (code) or x (model) values"),
):
    """Widen each recorded flip into a byte window and replay the whole window."""
    require(image, record)
    if level not in (CODE_LEVEL, MODEL_LEVEL):
        console.print(f"[red]✗ Unknown level: {level}. Use: {CODE_LEVEL}, {MODEL_LEVEL}[/red]")
        raise typer.Exit(1)
    st = state(ctx)
    cfg = st.experiment()
    ad = cfg.adaptive
    radii = list(radius) if radius else (ad.x1 if level == CODE_LEVEL else ad.x)
    with guarded():
        trials = adaptive_sweep(
            load_image(image),
            load_record(record),
            st.dataset(),
            level,
            radii,
            ad.x2,
            ad.al,
            ad.mode,
            cfg.search.step_budget,
        )

    table = Table(title=f"🧪 Adaptive {level}-level sweep", box=box.ROUNDED, border_style="green")
    table.add_column("Radius", justify="right", style="bold cyan")
    table.add_column("Shift", justify="right")
    table.add_column("Flips", justify="right")
    table.add_column("Outcome")
    table.add_column("Accuracy", justify="right")
    for trial in trials:
        table.add_row(
            str(trial.x1 if level == CODE_LEVEL else trial.x),
            "—" if trial.x2 is None else str(trial.x2),
            str(trial.flips),
            trial.outcome.value,
            "—" if trial.accuracy is None else f"{trial.accuracy:.4f}",
        )
    console.print(table)
