"""Experiment orchestration: the seeded end-to-end pipeline, overhead, rotation and reports."""

import csv
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from decoy import attack as atk
from decoy.config import ExperimentConfig
from decoy.engine import (
    VM_KERNEL,
    Dataset,
    EvalReport,
    Outcome,
    evaluate,
    forward,
    generate_dataset,
    quantize,
    train,
    with_backend,
)
from decoy.errors import FormatError, StageError
from decoy.formats import load_record, load_vulns, save_record, save_vulns
from decoy.image import CODE, WEIGHTS, MemoryImage, build_image, load_image, save_image
from decoy.obfuscate import DEFAULT_LAYER_SHARE, ObfuscationPattern, apply_pattern, generate_pattern
from decoy.rng import derive_seed
from decoy.search import CODE_LEVEL, MODEL, VulnerabilityList, rank_vulnerable_weights, search_code_vulnerabilities
from decoy.vm import GEMV_HEADER, VmKernel, load_kernel, program_from_image

logger = logging.getLogger(__name__)

REPORT_VERSION = 1
JSONL = "jsonl"
CSV = "csv"
# targeted replays count as mitigated up to this much above the clean confusion rate
ASR_SLACK = 0.05

COLUMNS = (
    "trial",
    "phase",
    "level",
    "seed",
    "prob",
    "accuracy",
    "asr",
    "flips",
    "radius",
    "shift",
    "outcome",
    "steps_executed",
    "image_bytes",
    "records",
    "nops",
    "mitigated",
    "d_storage",
    "d_storage_pct",
    "d_steps",
    "d_steps_pct",
    "d_memory",
    "d_time",
    "wall_time",
)
TIMING_COLUMNS = ("d_time", "wall_time")


@dataclass
class Report:
    rows: List[Dict[str, Any]] = field(default_factory=list)
    meta: Dict[str, Any] = field(default_factory=dict)

    def add(self, **values: Any) -> Dict[str, Any]:
        unknown = set(values) - set(COLUMNS)
        if unknown:
            raise ValueError(f"unknown report columns: {sorted(unknown)}")
        row = {column: values.get(column) for column in COLUMNS}
        self.rows.append(row)
        return row

    def phases(self) -> List[str]:
        return list(dict.fromkeys(row["phase"] for row in self.rows))

    def aggregates(self) -> Dict[str, Dict[str, Any]]:
        """Per-phase summary, recomputed from the rows on every call."""
        out: Dict[str, Dict[str, Any]] = {}
        for phase in self.phases():
            rows = [r for r in self.rows if r["phase"] == phase]
            summary: Dict[str, Any] = {"count": len(rows)}
            for column in ("accuracy", "asr", "d_storage_pct", "d_steps_pct"):
                values = [r[column] for r in rows if r[column] is not None]
                if values:
                    summary[column] = {"mean": float(np.mean(values)), "min": min(values), "max": max(values)}
            flags = [r["mitigated"] for r in rows if r["mitigated"] is not None]
            if flags:
                summary["mitigation_rate"] = sum(bool(f) for f in flags) / len(flags)
            outcomes = [r["outcome"] for r in rows if r["outcome"] is not None]
            if outcomes:
                summary["outcomes"] = {name: outcomes.count(name) for name in sorted(set(outcomes))}
            out[phase] = summary
        return out

    def mitigation_rate(self, phase: str) -> Optional[float]:
        return self.aggregates().get(phase, {}).get("mitigation_rate")


@contextmanager
def _stage(name: str) -> Iterator[None]:
    started = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    logger.info("stage %s done in %.2fs", name, time.perf_counter() - started)


# ── Overhead ─────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class Overhead:
    """Deltas between a clean and an obfuscated image; storage is relative to the clean WEIGHTS section."""

    storage_clean: int
    storage_obf: int
    steps_clean: int
    steps_obf: int
    memory_clean: int
    memory_obf: int
    d_time: float
    weights_clean: int = 0

    @property
    def d_storage(self) -> int:
        return self.storage_obf - self.storage_clean

    @property
    def d_storage_pct(self) -> float:
        return 100.0 * self.d_storage / self.weights_clean if self.weights_clean else 0.0

    @property
    def d_steps(self) -> int:
        return self.steps_obf - self.steps_clean

    @property
    def d_steps_pct(self) -> float:
        return 100.0 * self.d_steps / self.steps_clean if self.steps_clean else 0.0

    @property
    def d_memory(self) -> int:
        return self.memory_obf - self.memory_clean


def working_memory(img: MemoryImage) -> int:
    """Payload bytes plus the largest per-sample activation and VM data buffers."""
    slots = img.layout.slots
    activations = max((int(np.prod(s.in_shape)) + s.weight_shape[0] for s in slots), default=0)
    vm_words = max(
        (
            GEMV_HEADER + s.weight_bytes + s.weight_shape[1] + 2 * s.weight_shape[0]
            for s in slots
            if s.backend == VM_KERNEL
        ),
        default=0,
    )
    return img.size + 4 * activations + 4 * vm_words


def _timed_run(img: MemoryImage, ds: Dataset, step_budget: int) -> Tuple[int, float]:
    kernel = VmKernel(program_from_image(img), step_budget) if img.section(CODE).length else None
    started = time.perf_counter()
    evaluate(img.network(), ds, kernel)
    return (kernel.steps if kernel else 0), time.perf_counter() - started


def measure_overhead(
    clean: MemoryImage, obf: MemoryImage, ds: Dataset, trials: int = 3, step_budget: int = 1_000_000
) -> Overhead:
    """Storage, step and memory deltas are exact; the time delta is a mean over `trials` runs."""
    steps_clean = steps_obf = 0
    deltas = []
    for _ in range(max(trials, 1)):
        steps_clean, t_clean = _timed_run(clean, ds, step_budget)
        steps_obf, t_obf = _timed_run(obf, ds, step_budget)
        deltas.append(t_obf - t_clean)
    return Overhead(
        storage_clean=clean.size,
        storage_obf=obf.size,
        steps_clean=steps_clean,
        steps_obf=steps_obf,
        memory_clean=working_memory(clean),
        memory_obf=working_memory(obf),
        d_time=float(np.mean(deltas)),
        weights_clean=clean.section(WEIGHTS).length,
    )


# ── Rotation ─────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class Rotation:
    request: int
    generation: int
    instance: int
    image: MemoryImage
    pattern: ObfuscationPattern
    wall_time: float


def rotate(
    img: MemoryImage,
    vuln: Sequence[VulnerabilityList],
    ds: Dataset,
    interval: int,
    requests: int,
    seed: int = 0,
    prob: float = 0.3,
    instances: int = 1,
    max_retries: int = 32,
    research: bool = True,
    layer_share: float = DEFAULT_LAYER_SHARE,
    step_budget: int = 1_000_000,
) -> Iterator[Rotation]:
    """Serve `requests` simulated inference requests, regenerating a pattern every `interval`.

    Instances are refreshed round-robin, one per regeneration. Every pattern is
    verified against `ds` like the defend stage, and a swap only happens after
    the new image yields bit-identical logits to `img` on the eval split.
    """
    if interval < 1:
        raise ValueError("interval must be at least 1")
    if instances < 1:
        raise ValueError("instances must be at least 1")
    x = ds.eval.x
    expected = forward(img.network(), x)
    generation = 0
    for request in range(interval, requests + 1, interval):
        instance = generation % instances
        started = time.perf_counter()
        pattern = generate_pattern(
            img,
            vuln,
            prob,
            derive_seed(seed, "rotate", generation),
            max_retries,
            ds=ds,
            step_budget=step_budget,
            research=research,
            layer_share=layer_share,
        )
        image = apply_pattern(img, pattern)
        if not np.array_equal(forward(image.network(), x), expected):
            raise StageError("rotate", RuntimeError(f"generation {generation} changed the logits"))
        elapsed = time.perf_counter() - started
        logger.info("rotation %d at request %d: instance %d swapped in %.2fs", generation, request, instance, elapsed)
        yield Rotation(request, generation, instance, image, pattern, elapsed)
        generation += 1


# ── Pipeline ─────────────────────────────────────────────────────────────────


@dataclass
class Artifacts:
    """Everything produced before the trial phases; each piece is persistable."""

    ds: Dataset
    image: MemoryImage
    vulns: List[VulnerabilityList] = field(default_factory=list)
    records: Dict[str, atk.AttackRecord] = field(default_factory=dict)

    @property
    def baseline(self) -> float:
        return evaluate(self.image.network(), self.ds).accuracy or 0.0

    def vulns_at(self, level: str) -> Optional[VulnerabilityList]:
        return next((v for v in self.vulns if v.level == level), None)


def experiment_dataset(cfg: ExperimentConfig) -> Dataset:
    """The configured dataset; it is never stored, only regenerated from the seed."""
    return generate_dataset(derive_seed(cfg.seed, "data"), cfg.data.n_per_class, cfg.data.n_classes, cfg.data.dim)


def prepare(cfg: ExperimentConfig) -> Artifacts:
    """data, train, quantize, build image, search, then attack the clean image."""
    with _stage("data"):
        ds = experiment_dataset(cfg)
    with _stage("train"):
        net_fp = train(
            cfg.network.layers,
            ds,
            cfg.train.epochs,
            cfg.train.lr,
            derive_seed(cfg.seed, "train"),
            cfg.train.batch_size,
        )
    with _stage("build-image"):
        net = with_backend(quantize(net_fp), cfg.network.vm_layers)
        image = build_image(net, load_kernel() if cfg.network.vm_layers else None)
    art = Artifacts(ds, image)

    levels = set(cfg.search.levels)
    with _stage("search"):
        if MODEL in levels:
            art.vulns.append(rank_vulnerable_weights(net, ds, cfg.search.k))
        if CODE_LEVEL in levels and cfg.network.vm_layers:
            art.vulns.append(
                search_code_vulnerabilities(
                    image, ds, cfg.search.drop_tolerance, cfg.search.step_budget, cfg.search.prune_unreached
                )
            )
    with _stage("attack"):
        a = cfg.attack
        if MODEL in levels:
            art.records["untargeted"] = atk.untargeted_bfa(
                image, ds, a.budget, a.stop_acc, derive_seed(cfg.seed, "attack"), a.pool
            )
            if a.targeted:
                art.records["targeted"] = atk.targeted_bfa(
                    image, ds, a.source, a.target, a.targeted_budget, derive_seed(cfg.seed, "targeted"), a.lam
                )
        code_list = art.vulns_at(CODE_LEVEL)
        if code_list is not None and len(code_list):
            art.records["code"] = atk.code_attack(
                image, code_list, ds, a.code_budget, derive_seed(cfg.seed, "code-attack"), cfg.search.step_budget
            )
    return art


def save_artifacts(art: Artifacts, directory: Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_image(art.image, directory / "image.barm")
    for vl in art.vulns:
        save_vulns(vl, directory / f"vulns-{vl.level}.jsonl")
    for name, rec in art.records.items():
        save_record(rec, directory / f"attack-{name}.jsonl")
    return directory


def load_artifacts(directory: Path, cfg: ExperimentConfig) -> Artifacts:
    """Reload saved artifacts; the dataset is regenerated from `cfg`."""
    directory = Path(directory)
    if not (directory / "image.barm").exists():
        raise FormatError(f"{directory} holds no image.barm")
    art = Artifacts(experiment_dataset(cfg), load_image(directory / "image.barm"))
    for level in (MODEL, CODE_LEVEL):
        path = directory / f"vulns-{level}.jsonl"
        if path.exists():
            art.vulns.append(load_vulns(path))
    for name in ("untargeted", "targeted", "code"):
        path = directory / f"attack-{name}.jsonl"
        if path.exists():
            art.records[name] = load_record(path)
    return art


def _mitigated(kind: str, result: EvalReport, art: Artifacts, baseline: float, tolerance: float) -> bool:
    if kind == "targeted":
        return result.asr is not None and result.asr <= art.records["targeted"].baseline + ASR_SLACK
    if result.outcome is not Outcome.OK:
        # crashes and timeouts are loud failures, not silent degradation
        return kind == "code"
    return result.accuracy is not None and result.accuracy >= baseline - tolerance


def _meta(cfg: ExperimentConfig, art: Artifacts, baseline: float) -> Dict[str, Any]:
    meta: Dict[str, Any] = {
        "name": cfg.name,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "baseline_accuracy": baseline,
        "image_bytes": art.image.size,
        "image_digest": art.image.digest(),
    }
    for vl in art.vulns:
        meta[f"{vl.level}_vulnerabilities"] = len(vl)
        if vl.trials:
            meta[f"{vl.level}_sweep"] = vl.stats()
    for name, rec in art.records.items():
        meta[f"{name}_attack"] = {"flips": len(rec.flips), "achieved": rec.achieved, "baseline": rec.baseline}
    return meta


def guard_windows(cfg: ExperimentConfig) -> List[List[atk.AdaptiveRangeSpec]]:
    """The adaptive code windows, grouped the way the adaptive stage flips them."""
    ad = cfg.adaptive
    if not ad.enabled or CODE_LEVEL not in cfg.search.levels:
        return []
    groups: List[List[atk.AdaptiveRangeSpec]] = []
    for radius in ad.x1:
        specs = [atk.AdaptiveRangeSpec(x1=radius, x2=shift, al=ad.al) for shift in ad.x2]
        groups.extend([[spec] for spec in specs] if ad.mode == atk.SEPARATE else [specs])
    return groups


def defend_pattern(cfg: ExperimentConfig, art: Artifacts, prob: float, seed: int) -> ObfuscationPattern:
    """A pattern for the artifacts' image, verified the way the config asks."""
    ob = cfg.obfuscation
    return generate_pattern(
        art.image,
        art.vulns,
        prob,
        seed,
        ob.max_retries,
        ds=art.ds,
        drop_tolerance=cfg.search.drop_tolerance,
        step_budget=cfg.search.step_budget,
        research=ob.verify,
        layer_share=ob.layer_share,
        windows=guard_windows(cfg),
    )


def run_trials(cfg: ExperimentConfig, art: Artifacts) -> Report:
    """Pattern seeds with defended replays, then the adaptive grid, random flips and overhead."""
    baseline = art.baseline
    report = Report(meta=_meta(cfg, art, baseline))
    if cfg.trials.trials == 0:
        return report
    ds, img, ob = art.ds, art.image, cfg.obfuscation
    step_budget = cfg.search.step_budget
    tolerance = cfg.attack.tolerance
    first: Optional[Tuple[MemoryImage, ObfuscationPattern]] = None

    with _stage("defend"):
        for t in range(cfg.trials.trials):
            started = time.perf_counter()
            pattern_seed = derive_seed(cfg.seed, "pattern", t)
            pattern = defend_pattern(cfg, art, ob.prob, pattern_seed)
            obf = apply_pattern(img, pattern)
            if first is None:
                first = (obf, pattern)
            clean = atk.replay(obf, (), ds, step_budget).report
            report.add(
                trial=t,
                phase="obfuscated",
                seed=pattern_seed,
                prob=ob.prob,
                accuracy=clean.accuracy,
                outcome=clean.outcome.value,
                steps_executed=clean.steps_executed,
                image_bytes=obf.size,
                records=len(pattern.records),
                nops=pattern.nop_total,
                wall_time=time.perf_counter() - started,
            )
            for kind, rec in art.records.items():
                result = atk.replay(obf, rec, ds, step_budget).report
                report.add(
                    trial=t,
                    phase=f"defended-{kind}",
                    level=CODE_LEVEL if kind == "code" else MODEL,
                    seed=pattern_seed,
                    accuracy=result.accuracy,
                    asr=result.asr,
                    flips=len(rec.flips),
                    outcome=result.outcome.value,
                    steps_executed=result.steps_executed,
                    image_bytes=obf.size,
                    mitigated=_mitigated(kind, result, art, baseline, tolerance),
                )

    if cfg.adaptive.enabled and first is not None:
        with _stage("adaptive"):
            ad = cfg.adaptive
            plans = []
            if "code" in art.records:
                plans.append((atk.CODE_LEVEL, art.records["code"], ad.x1))
            if "untargeted" in art.records:
                plans.append((atk.MODEL_LEVEL, art.records["untargeted"], ad.x))
            for level, rec, radii in plans:
                sweep = atk.adaptive_sweep(first[0], rec, ds, level, radii, ad.x2, ad.al, ad.mode, step_budget)
                for i, trial in enumerate(sweep):
                    ok = trial.outcome is Outcome.OK
                    report.add(
                        trial=i,
                        phase=f"adaptive-{level}",
                        level=level,
                        radius=trial.x1 if level == atk.CODE_LEVEL else trial.x,
                        shift=trial.x2,
                        accuracy=trial.accuracy,
                        flips=trial.flips,
                        outcome=trial.outcome.value,
                        mitigated=not ok or (trial.accuracy or 0.0) >= baseline - tolerance,
                    )

    if cfg.trials.random_trials:
        with _stage("random-flip"):
            trials = atk.random_flip_trials(
                img, ds, cfg.trials.random_flips, cfg.trials.random_trials, derive_seed(cfg.seed, "random")
            )
            for i, trial in enumerate(trials):
                report.add(
                    trial=i,
                    phase="random-flip",
                    level=MODEL,
                    seed=trial.seed,
                    accuracy=trial.accuracy,
                    flips=len(trial.flips),
                    mitigated=trial.drop < tolerance,
                )

    if first is not None:
        with _stage("overhead"):
            _overhead_row(report, img, first[0], first[1], ds, cfg, "overhead", 0)
            for i, prob in enumerate(cfg.trials.overhead_probs):
                pattern = defend_pattern(cfg, art, prob, derive_seed(cfg.seed, "overhead", i))
                _overhead_row(report, img, apply_pattern(img, pattern), pattern, ds, cfg, "overhead-sweep", i)
    return report


def _overhead_row(
    report: Report,
    img: MemoryImage,
    obf: MemoryImage,
    pattern: ObfuscationPattern,
    ds: Dataset,
    cfg: ExperimentConfig,
    phase: str,
    trial: int,
) -> None:
    ov = measure_overhead(img, obf, ds, cfg.trials.overhead_trials, cfg.search.step_budget)
    report.add(
        trial=trial,
        phase=phase,
        seed=pattern.attempt_seed,
        prob=pattern.prob,
        steps_executed=ov.steps_obf,
        image_bytes=obf.size,
        records=len(pattern.records),
        nops=pattern.nop_total,
        d_storage=ov.d_storage,
        d_storage_pct=ov.d_storage_pct,
        d_steps=ov.d_steps,
        d_steps_pct=ov.d_steps_pct,
        d_memory=ov.d_memory,
        d_time=ov.d_time,
    )


def run_experiment(cfg: ExperimentConfig, resume: Optional[Path] = None) -> Report:
    """Run the whole pipeline, or only the trial phases on artifacts saved by an earlier run."""
    started = time.perf_counter()
    if resume is not None:
        with _stage("resume"):
            art = load_artifacts(resume, cfg)
    else:
        art = prepare(cfg)
    report = run_trials(cfg, art)
    logger.info("experiment %s: %d rows in %.2fs", cfg.name, len(report.rows), time.perf_counter() - started)
    return report


# ── Report files ─────────────────────────────────────────────────────────────


def _csv_cell(value: Any) -> Any:
    if value is None:
        return ""
    # repr keeps every digit of a float
    return repr(value) if isinstance(value, float) else value


def emit_report(rep: Report, path: Path, fmt: str = JSONL) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == JSONL:
        lines = [json.dumps({"type": "meta", "format_version": REPORT_VERSION, **rep.meta})]
        lines += [json.dumps({"type": "row", **row}) for row in rep.rows]
        lines += [json.dumps({"type": "aggregate", "phase": p, **a}) for p, a in rep.aggregates().items()]
        path.write_text("\n".join(lines) + "\n")
    elif fmt == CSV:
        with path.open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(COLUMNS)
            for row in rep.rows:
                writer.writerow([_csv_cell(row[c]) for c in COLUMNS])
    else:
        raise ValueError(f"unknown report format '{fmt}'")
    return path


def load_report(path: Path) -> Report:
    report = Report()
    seen_meta = False
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        try:
            item = json.loads(line)
        except json.JSONDecodeError:
            raise FormatError(f"{path}: not a json-lines report") from None
        if not isinstance(item, dict):
            raise FormatError(f"{path}: not a json-lines report")
        kind = item.pop("type", None)
        if kind == "meta":
            if item.pop("format_version", None) != REPORT_VERSION:
                raise FormatError(f"{path}: unsupported report version")
            report.meta = item
            seen_meta = True
        elif kind == "row":
            report.rows.append({c: item.get(c) for c in COLUMNS})
    if not seen_meta:
        raise FormatError(f"{path} is not a report file")
    return report


def strip_timing(rep: Report) -> List[Dict[str, Any]]:
    """Rows without wall-clock columns, for determinism comparisons."""
    return [{k: v for k, v in row.items() if k not in TIMING_COLUMNS} for row in rep.rows]
