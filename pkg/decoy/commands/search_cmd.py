"""Find vulnerable weight bits and conditional jumps."""

from pathlib import Path
from typing import Optional

import typer
from rich import box
from rich.table import Table

from decoy.commands.common import console, guarded, require, state
from decoy.formats import save_vulns
from decoy.image import load_image
from decoy.search import VulnerabilityList, rank_vulnerable_weights, search_code_vulnerabilities

app = typer.Typer(no_args_is_help=True)


def _show(vl: VulnerabilityList, limit: int) -> None:
    table = Table(
        title=f"🎯 {vl.level.capitalize()}-level vulnerabilities ({len(vl)})", box=box.ROUNDED, border_style="green"
    )
    table.add_column("#", justify="right")
    table.add_column("Address", style="bold cyan")
    table.add_column("Location")
    table.add_column("Score", justify="right")
    for i, entry in enumerate(list(vl)[:limit]):
        table.add_row(str(i), str(entry.address), entry.provenance.describe(), f"{entry.score:.6g}")
    console.print(table)
    if len(vl) > limit:
        console.print(f"[dim]… {len(vl) - limit} more[/dim]")


@app.command("model")
def model(
    ctx: typer.Context,
    image: Path = typer.Option(..., "--image", "-i", help="Image file"),
    k: Optional[int] = typer.Option(None, "--top", "-k", help="Number of weights to keep"),
    output: Optional[Path] = typer.Option(None, "--output", "-o", help="Vulnerability list (.jsonl)"),
    show: int = typer.Option(10, "--show", help="Rows to print"),
):
    """Rank weights by gradient magnitude and list their MSB addresses."""
    require(image)
    st = state(ctx)
    cfg = st.experiment()
    path = st.output("vulns-model.jsonl", output)
    with guarded():
        img = load_image(image)
        vl = rank_vulnerable_weights(img.network(), st.dataset(), cfg.search.k if k is None else k)
        save_vulns(vl, path)

    _show(vl, show)
    console.print(f"[green]✓ Saved {len(vl)} entries → {path}[/green]")


@app.command("code")
def code(
    ctx: typer.Context,
    image: Path = typer.Option(..., "--image", "-i", help="Image file with a CODE section"),
    tolerance: Optional[float] = typer.Option(None, "--tolerance", "-t", help="Accuracy drop that counts"),
    no_prune: bool = typer.Option(False, "--no-prune", help="Also run jumps clean inference never reaches"),
    output: Optional[Path] = typer.Option(None, "--output", "-o", help="Vulnerability list (.jsonl)"),
):
    """Flip every conditional jump in the kernel and record which ones hurt accuracy."""
    require(image)
    st = state(ctx)
    cfg = st.experiment()
    path = st.output("vulns-code.jsonl", output)
    with guarded():
        vl = search_code_vulnerabilities(
            load_image(image),
            st.dataset(),
            cfg.search.drop_tolerance if tolerance is None else tolerance,
            cfg.search.step_budget,
            prune_unreached=not no_prune,
        )
        save_vulns(vl, path)

    sweep = Table(title="🔀 Jump sweep", box=box.ROUNDED, border_style="green")
    sweep.add_column("Jump", style="bold cyan")
    sweep.add_column("Outcome")
    sweep.add_column("Accuracy", justify="right")
    sweep.add_column("Steps", justify="right")
    colors = {"benign": "green", "drop": "red", "crash": "yellow", "timeout": "magenta"}
    for trial in vl.trials:
        outcome = f"[{colors[trial.outcome]}]{trial.outcome}[/{colors[trial.outcome]}]"
        if trial.pruned:
            outcome += " [dim](unreached)[/dim]"
        accuracy = "—" if trial.accuracy is None else f"{trial.accuracy:.4f}"
        sweep.add_row(trial.jump.describe(), outcome, accuracy, str(trial.steps))
    console.print(sweep)
    stats = ", ".join(f"{name} {count}" for name, count in vl.stats().items())
    console.print(f"[green]✓ {stats} → {path}[/green]")
