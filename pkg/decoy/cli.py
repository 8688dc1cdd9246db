"""Decoy CLI — Main entry point."""

import logging
from pathlib import Path
from typing import Optional

import typer
from rich import box
from rich.logging import RichHandler
from rich.panel import Panel
from rich.table import Table

from decoy import __version__
from decoy.commands import attack_cmd, data_cmd, harness_cmd, image_cmd, obfuscate_cmd, search_cmd
from decoy.commands.common import State, console

app = typer.Typer(
    name="decoy",
    help="🎭 Decoy — Randomized dummy-operation defense against bit-flip attacks",
    add_completion=True,
    no_args_is_help=True,
    rich_markup_mode="rich",
)

# Register command groups
app.add_typer(data_cmd.app, name="data", help="📦 Generate datasets & train networks")
app.add_typer(image_cmd.app, name="image", help="🧱 Build & inspect memory images")
app.add_typer(search_cmd.app, name="search", help="🎯 Find vulnerable weights & jumps")
app.add_typer(obfuscate_cmd.app, name="obfuscate", help="🎭 Generate & apply obfuscation patterns")
app.add_typer(attack_cmd.app, name="attack", help="⚡ Simulate & replay bit-flip attacks")
app.add_typer(harness_cmd.app, name="harness", help="🛡️ Run experiments, rotate patterns & read reports")


@app.callback()
def main_options(
    ctx: typer.Context,
    seed: Optional[int] = typer.Option(None, "--seed", help="Override the experiment seed"),
    config: Optional[str] = typer.Option(
        None, "--config", "-c", help="YAML config path or bundled name (model-defense, code-defense, pipeline)"
    ),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory"),
    verbose: bool = typer.Option(False, "--verbose", "-V", help="Debug logging"),
):
    """Global options shared by every command."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(message)s",
        handlers=[RichHandler(console=console, show_path=False, rich_tracebacks=True)],
        force=True,
    )
    ctx.obj = State(seed=seed, config=config, out=out, verbose=verbose)


@app.command("version")
def version():
    """Show Decoy version."""
    console.print(
        Panel(
            f"[bold green]🎭 Decoy[/bold green] v{__version__}\n"
            f"[dim]Randomized dummy-operation defense against bit-flip attacks[/dim]",
            box=box.ROUNDED,
            border_style="green",
        )
    )


@app.command("info")
def info():
    """Show all available command groups."""
    commands = [
        ("data", "Datasets & training", "gen, train (seeded Gaussian blobs, int8 quantization)"),
        ("image", "Memory images", "build, inspect (WEIGHTS + CODE sections, coordinate map)"),
        ("search", "Vulnerability search", "model (gradient top-k MSBs), code (jump-flip sweep)"),
        ("obfuscate", "Obfuscation patterns", "apply (dummy layers, dummy neurons, NOPs), inspect"),
        ("attack", "Attack simulation", "untargeted, targeted, code, replay, adaptive"),
        ("harness", "Experiments", "run (full pipeline), rotate, report"),
    ]

    table = Table(
        title="🎭 Decoy — Available Commands",
        box=box.ROUNDED,
        border_style="green",
        title_style="bold green",
    )
    table.add_column("Command", style="bold cyan", min_width=12)
    table.add_column("Description", style="white")
    table.add_column("Features", style="dim")

    for cmd, desc, features in commands:
        table.add_row(f"decoy {cmd}", desc, features)

    console.print(table)
    console.print("\n[dim]Run [bold]decoy <command> --help[/bold] for detailed usage.[/dim]")


def main():
    """Entry point for the CLI."""
    app()


if __name__ == "__main__":
    main()
