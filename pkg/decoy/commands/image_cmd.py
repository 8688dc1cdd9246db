"""Build and inspect flat memory images."""

from pathlib import Path
from typing import List, Optional

import typer
from rich import box
from rich.table import Table

from decoy.commands.common import console, guarded, require, state
from decoy.engine import load_network, quantize, with_backend
from decoy.image import CODE, build_image, load_image, save_image
from decoy.vm import load_kernel, program_from_image

app = typer.Typer(no_args_is_help=True)


@app.command("build")
def build(
    ctx: typer.Context,
    model: Path = typer.Option(..., "--model", "-m", help="Model file from `decoy data train`"),
    output: Optional[Path] = typer.Option(None, "--output", "-o", help="Image file (.barm)"),
    vm_layer: Optional[List[int]] = typer.Option(None, "--vm-layer", help="Layer index run by the VM kernel"),
):
    """Lay a model out as WEIGHTS + CODE sections."""
    require(model)
    st = state(ctx)
    cfg = st.experiment()
    path = st.output("image.barm", output)
    vm_layers = list(vm_layer) if vm_layer else cfg.network.vm_layers
    with guarded():
        net = load_network(model)
        if not net.quantized:
            net = quantize(net)
        net = with_backend(net, vm_layers)
        img = build_image(net, load_kernel() if vm_layers else None)
        save_image(img, path)

    console.print(f"[green]✓ Built {img.size}-byte image → {path}[/green]")
    console.print(f"[dim]sha256 {img.digest()}[/dim]")


@app.command("inspect")
def inspect(
    file: Path = typer.Argument(..., help="Image file"),
    disassemble: bool = typer.Option(False, "--disasm", "-d", help="Print the CODE section listing"),
):
    """Show sections, layer slots and the coordinate map of an image."""
    require(file)
    with guarded():
        img = load_image(file)

    sections = Table(title=f"🧱 Sections — {file.name}", box=box.ROUNDED, border_style="green")
    sections.add_column("Section", style="bold cyan")
    sections.add_column("Offset", justify="right")
    sections.add_column("Bytes", justify="right")
    sections.add_column("SHA-256", style="dim")
    for section in img.sections:
        sections.add_row(section.name, str(section.offset), str(section.length), img.section_digest(section.name)[:16])
    console.print(sections)

    slots = Table(title="Layer slots", box=box.ROUNDED, border_style="green")
    slots.add_column("#", justify="right")
    slots.add_column("Kind", style="bold cyan")
    slots.add_column("Shape")
    slots.add_column("Backend")
    slots.add_column("Weights @", justify="right")
    slots.add_column("Bias @", justify="right")
    slots.add_column("Origin", style="dim")
    for i, slot in enumerate(img.layout.slots):
        origin = "dummy" if slot.dummy else f"layer {slot.origin}"
        dummy_rows = sum(r < 0 for r in slot.row_origin)
        if dummy_rows and not slot.dummy:
            origin += f" (+{dummy_rows} dummy rows)"
        slots.add_row(
            str(i),
            slot.kind,
            "×".join(str(d) for d in slot.weight_shape),
            slot.backend,
            str(slot.weight_offset),
            str(slot.bias_offset),
            origin,
        )
    console.print(slots)

    if disassemble and img.section(CODE).length:
        console.print(program_from_image(img).disassemble(), markup=False, highlight=False)
