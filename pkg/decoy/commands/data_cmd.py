"""Preview the seeded dataset and train networks."""

from pathlib import Path
from typing import Optional

import numpy as np
import typer
from rich import box
from rich.panel import Panel

from decoy.commands.common import console, guarded, state
from decoy.engine import quantize, save_network, train
from decoy.rng import derive_seed

app = typer.Typer(no_args_is_help=True)


@app.command("gen")
def gen(ctx: typer.Context):
    """Show the dataset the configured seed produces (it is regenerated, never stored)."""
    st = state(ctx)
    cfg = st.experiment()
    ds = st.dataset()
    counts = " · ".join(f"{c}: {n}" for c, n in enumerate(np.bincount(ds.y, minlength=ds.n_classes)))

    console.print(
        Panel(
            f"[bold white]{len(ds)}[/bold white] samples · {ds.n_classes} classes · dim {ds.dim}\n"
            f"train [cyan]{len(ds.train)}[/cyan] / eval [cyan]{len(ds.eval)}[/cyan]\n"
            f"[dim]{counts}[/dim]",
            title=f"📦 Dataset — seed {cfg.seed}",
            border_style="green",
            box=box.ROUNDED,
        )
    )


@app.command("train")
def train_cmd(
    ctx: typer.Context,
    output: Optional[Path] = typer.Option(None, "--output", "-o", help="Model file (.bann)"),
    epochs: Optional[int] = typer.Option(None, "--epochs", "-e", help="Training epochs"),
    float_only: bool = typer.Option(False, "--float", help="Save the float network without quantizing"),
):
    """Train the configured network on the seeded dataset and save it quantized."""
    st = state(ctx)
    cfg = st.experiment()
    ds = st.dataset()
    path = st.output("model.bann", output)
    with guarded():
        net = train(
            cfg.network.layers,
            ds,
            cfg.train.epochs if epochs is None else epochs,
            cfg.train.lr,
            derive_seed(cfg.seed, "train"),
            cfg.train.batch_size,
        )
        accuracy = net.meta.get("eval_accuracy", 0.0)
        if not float_only:
            net = quantize(net)
        save_network(net, path)

    kind = "float32" if float_only else "int8"
    console.print(f"[green]✓ Trained {kind} network, eval accuracy {accuracy:.4f} → {path}[/green]")
