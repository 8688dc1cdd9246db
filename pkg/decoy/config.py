"""Experiment configuration: frozen dataclasses loaded from YAML."""

from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml

from decoy.errors import ConfigError

FORMAT_VERSION = 1
BUNDLED = ("model-defense", "code-defense", "pipeline")


@dataclass(frozen=True)
class DataConfig:
    n_per_class: int = 250
    n_classes: int = 4
    dim: int = 16


@dataclass(frozen=True)
class NetworkConfig:
    # first entry is the input size ("CxHxW" for conv inputs)
    layers: List[Any] = field(default_factory=lambda: [16, 32, 32, 4])
    vm_layers: List[int] = field(default_factory=lambda: [-1])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    lr: float = 0.1
    batch_size: int = 32


@dataclass(frozen=True)
class SearchConfig:
    levels: List[str] = field(default_factory=lambda: ["model", "code"])
    k: int = 100
    drop_tolerance: float = 0.05
    step_budget: int = 1_000_000
    prune_unreached: bool = True


@dataclass(frozen=True)
class ObfuscationConfig:
    prob: float = 0.3
    max_retries: int = 32
    # re-run the searchers on every candidate layout
    verify: bool = True
    layer_share: float = 0.05


@dataclass(frozen=True)
class AttackConfig:
    budget: int = 20
    stop_acc: float = 0.35
    pool: int = 16
    targeted: bool = True
    targeted_budget: int = 8
    source: int = 0
    target: int = 1
    lam: float = 1.0
    code_budget: int = 1
    tolerance: float = 0.05


@dataclass(frozen=True)
class AdaptiveConfig:
    enabled: bool = True
    x1: List[int] = field(default_factory=lambda: [5, 10, 15, 20, 25, 30, 35, 40, 45])
    x2: List[int] = field(default_factory=lambda: [0, 1, 2])
    al: int = 16
    x: List[int] = field(default_factory=lambda: [3, 5, 7, 9, 11])
    mode: str = "separate"


@dataclass(frozen=True)
class RotationConfig:
    interval: int = 100
    requests: int = 350
    instances: int = 1
    # maps a wall-clock schedule onto request counts
    requests_per_minute: int = 10


@dataclass(frozen=True)
class TrialConfig:
    trials: int = 20
    random_flips: int = 20
    random_trials: int = 100
    overhead_trials: int = 3
    overhead_probs: List[float] = field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7, 0.9])


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "results"
    report: str = "report.jsonl"
    csv: str = "report.csv"


@dataclass(frozen=True)
class ExperimentConfig:
    format_version: int = FORMAT_VERSION
    name: str = "pipeline"
    seed: int = 7
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    obfuscation: ObfuscationConfig = field(default_factory=ObfuscationConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    adaptive: AdaptiveConfig = field(default_factory=AdaptiveConfig)
    rotation: RotationConfig = field(default_factory=RotationConfig)
    trials: TrialConfig = field(default_factory=TrialConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def with_overrides(self, seed: Optional[int] = None, out: Optional[Union[str, Path]] = None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        if out is not None:
            cfg = replace(cfg, output=replace(cfg.output, dir=str(out)))
        return cfg


def _coerce(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"'{key}' must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{key}' must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{key}' must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"'{key}' must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"'{key}' must be a list")
        if key == "network.layers":
            if not all(isinstance(item, (int, str)) and not isinstance(item, bool) for item in value):
                raise ConfigError(f"'{key}' entries must be widths or 'conv:F:K' strings")
            return list(value)
        if default and all(isinstance(d, (int, float)) and not isinstance(d, bool) for d in default):
            kind = float if any(isinstance(d, float) for d in default) else int
            for item in value:
                numeric = isinstance(item, (int, float)) and not isinstance(item, bool)
                if not numeric or (kind is int and isinstance(item, float)):
                    raise ConfigError(f"'{key}' must hold {kind.__name__} values")
            return [kind(item) for item in value]
        return list(value)
    return value


def _build(cls: type, data: Any, prefix: str = "") -> Any:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"'{prefix.rstrip('.') or 'config'}' must be a mapping")
    defaults = cls()
    known = {f.name: f for f in fields(cls)}
    values = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown key '{prefix}{key}'")
        default = getattr(defaults, key)
        if is_dataclass(default):
            values[key] = _build(type(default), value, f"{prefix}{key}.")
        else:
            values[key] = _coerce(f"{prefix}{key}", value, default)
    return cls(**values)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Range checks that field types alone do not catch."""
    checks = [
        (cfg.format_version == FORMAT_VERSION, "format_version", f"must be {FORMAT_VERSION}"),
        (cfg.data.n_classes >= 2, "data.n_classes", "must be at least 2"),
        (cfg.data.dim >= 2, "data.dim", "must be at least 2"),
        (cfg.data.n_per_class >= 1, "data.n_per_class", "must be positive"),
        (len(cfg.network.layers) >= 2, "network.layers", "needs an input size and a layer"),
        (cfg.train.epochs >= 0, "train.epochs", "must be non-negative"),
        (cfg.train.lr > 0, "train.lr", "must be positive"),
        (cfg.train.batch_size >= 1, "train.batch_size", "must be positive"),
        (set(cfg.search.levels) <= {"model", "code"}, "search.levels", "may only name model and code"),
        (cfg.search.k >= 0, "search.k", "must be non-negative"),
        (cfg.search.drop_tolerance > 0, "search.drop_tolerance", "must be positive"),
        (cfg.search.step_budget > 0, "search.step_budget", "must be positive"),
        (0.0 <= cfg.obfuscation.prob <= 1.0, "obfuscation.prob", "must lie in [0, 1]"),
        (cfg.obfuscation.max_retries >= 1, "obfuscation.max_retries", "must be positive"),
        (0.0 <= cfg.obfuscation.layer_share <= 1.0, "obfuscation.layer_share", "must lie in [0, 1]"),
        (cfg.attack.budget >= 0, "attack.budget", "must be non-negative"),
        (cfg.attack.source != cfg.attack.target, "attack.target", "must differ from attack.source"),
        (0 <= cfg.attack.source < cfg.data.n_classes, "attack.source", "must be a class index"),
        (0 <= cfg.attack.target < cfg.data.n_classes, "attack.target", "must be a class index"),
        (cfg.adaptive.al > 0, "adaptive.al", "must be positive"),
        (cfg.adaptive.mode in ("separate", "union"), "adaptive.mode", "must be separate or union"),
        (cfg.rotation.interval >= 1, "rotation.interval", "must be at least 1"),
        (cfg.rotation.instances >= 1, "rotation.instances", "must be at least 1"),
        (cfg.rotation.requests_per_minute >= 1, "rotation.requests_per_minute", "must be at least 1"),
        (cfg.trials.trials >= 0, "trials.trials", "must be non-negative"),
        (all(0.0 <= p <= 1.0 for p in cfg.trials.overhead_probs), "trials.overhead_probs", "must lie in [0, 1]"),
    ]
    for ok, key, message in checks:
        if not ok:
            raise ConfigError(f"'{key}' {message}")
    return cfg


def from_dict(data: Optional[Dict[str, Any]]) -> ExperimentConfig:
    return validate(_build(ExperimentConfig, data))


def load_config(path: Optional[Path] = None) -> ExperimentConfig:
    """Load a YAML config; no path (or an empty file) gives the defaults."""
    if path is None:
        return from_dict({})
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(data)


def bundled_config(name: str) -> ExperimentConfig:
    if name not in BUNDLED:
        raise ConfigError(f"no bundled config '{name}'; choose from {', '.join(BUNDLED)}")
    text = resources.files("decoy.configs").joinpath(f"{name}.yaml").read_text()
    return from_dict(yaml.safe_load(text))


def resolve_config(ref: Optional[str]) -> ExperimentConfig:
    """A bundled config name, a YAML path, or None for defaults."""
    if ref is None:
        return load_config()
    if ref in BUNDLED:
        return bundled_config(ref)
    path = Path(ref)
    if not path.exists():
        raise ConfigError(f"config file not found: {ref}")
    return load_config(path)
