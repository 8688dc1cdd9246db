"""Generate, apply and inspect obfuscation patterns."""

from pathlib import Path
from typing import List, Optional

import typer
from rich import box
from rich.panel import Panel
from rich.table import Table

from decoy.commands.common import console, guarded, require, state
from decoy.formats import load_pattern, load_vulns, save_pattern
from decoy.harness import guard_windows
from decoy.image import load_image, save_image
from decoy.obfuscate import DummyLayer, DummyNeurons, apply_pattern, generate_pattern
from decoy.rng import derive_seed

app = typer.Typer(no_args_is_help=True)


@app.command("apply")
def apply(
    ctx: typer.Context,
    image: Path = typer.Option(..., "--image", "-i", help="Clean image file"),
    vulns: List[Path] = typer.Option(..., "--vulns", "-v", help="Vulnerability list(s) to move away from"),
    verify: Optional[bool] = typer.Option(
        None, "--verify/--no-verify", help="Re-run the searchers on each layout (default from config)"
    ),
    prob: Optional[float] = typer.Option(None, "--prob", "-p", help="Insert probability per element"),
    trial: int = typer.Option(0, "--trial", "-t", help="Pattern index; each index derives a fresh seed"),
    output: Optional[Path] = typer.Option(None, "--output", "-o", help="Obfuscated image file"),
    pattern_out: Optional[Path] = typer.Option(None, "--pattern", help="Pattern file (.jsonl)"),
):
    """Draw a randomized pattern and write the obfuscated image."""
    require(image, *vulns)
    st = state(ctx)
    cfg = st.experiment()
    image_path = st.output("image.obf.barm", output)
    pattern_path = st.output("pattern.jsonl", pattern_out)
    with guarded():
        img = load_image(image)
        lists = [load_vulns(v) for v in vulns]
        pattern = generate_pattern(
            img,
            lists,
            cfg.obfuscation.prob if prob is None else prob,
            derive_seed(cfg.seed, "pattern", trial),
            cfg.obfuscation.max_retries,
            ds=st.dataset(),
            drop_tolerance=cfg.search.drop_tolerance,
            step_budget=cfg.search.step_budget,
            research=cfg.obfuscation.verify if verify is None else verify,
            layer_share=cfg.obfuscation.layer_share,
            windows=guard_windows(cfg),
        )
        obf = apply_pattern(img, pattern)
        save_pattern(pattern, pattern_path)
        save_image(obf, image_path)

    counts = pattern.counts()
    console.print(
        Panel(
            f"dummy layers [cyan]{counts['dummy_layers']}[/cyan]"
            f" · dummy neurons [cyan]{counts['dummy_neurons']}[/cyan]"
            f" · NOPs [cyan]{counts['nops']}[/cyan] at {counts['nop_sites']} sites\n"
            f"{img.size} → [bold white]{obf.size}[/bold white] bytes · retries {pattern.generation_retries}",
            title="🎭 Obfuscation pattern",
            border_style="green",
            box=box.ROUNDED,
        )
    )
    console.print(f"[green]✓ Image → {image_path}[/green]")
    console.print(f"[green]✓ Pattern → {pattern_path}[/green]")


@app.command("inspect")
def inspect(file: Path = typer.Argument(..., help="Pattern file")):
    """List the insertion records of a pattern."""
    require(file)
    with guarded():
        pattern = load_pattern(file)

    table = Table(
        title=f"🎭 Pattern — prob {pattern.prob}, {len(pattern.records)} records",
        box=box.ROUNDED,
        border_style="green",
    )
    table.add_column("Kind", style="bold cyan")
    table.add_column("Where")
    table.add_column("Size", justify="right")
    for rec in pattern.records:
        if isinstance(rec, DummyLayer):
            table.add_row("dummy layer", f"after layer {rec.after}", rec.kind)
        elif isinstance(rec, DummyNeurons):
            table.add_row("dummy neurons", f"layer {rec.layer} @ row {rec.position}", str(rec.n))
        else:
            table.add_row("nops", f"code +{rec.offset:#06x}", str(rec.count))
    console.print(table)
    console.print(f"[dim]image sha256 {pattern.image_digest}[/dim]")
