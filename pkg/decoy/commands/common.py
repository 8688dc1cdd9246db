"""Shared CLI plumbing: global options, config resolution and error-to-exit mapping."""

from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import typer
from rich.console import Console

from decoy.config import ExperimentConfig, resolve_config
from decoy.engine import Dataset
from decoy.errors import ConfigError, DecoyError
from decoy.harness import experiment_dataset

console = Console()


@dataclass
class State:
    seed: Optional[int] = None
    config: Optional[str] = None
    out: Optional[Path] = None
    verbose: bool = False

    def experiment(self) -> ExperimentConfig:
        with guarded():
            return resolve_config(self.config).with_overrides(seed=self.seed, out=self.out)

    def dataset(self) -> Dataset:
        """The configured dataset, regenerated from the seed."""
        cfg = self.experiment()
        with guarded():
            return experiment_dataset(cfg)

    def output(self, name: str, given: Optional[Path] = None) -> Path:
        """An explicit path, or `name` inside the configured output directory."""
        if given is not None:
            return given
        directory = Path(self.experiment().output.dir)
        directory.mkdir(parents=True, exist_ok=True)
        return directory / name


def state(ctx: typer.Context) -> State:
    root = ctx.find_root()
    if not isinstance(root.obj, State):
        root.obj = State()
    return root.obj


@contextmanager
def guarded() -> Iterator[None]:
    try:
        yield
    except ConfigError as exc:
        console.print(f"[red]✗ Config error: {exc}[/red]")
        raise typer.Exit(2)
    except DecoyError as exc:
        console.print(f"[red]✗ {exc}[/red]")
        raise typer.Exit(1)


def require(*paths: Optional[Path]) -> None:
    for path in paths:
        if path is not None and not path.exists():
            console.print(f"[red]✗ File not found: {path}[/red]")
            raise typer.Exit(1)
