"""Line-oriented JSON files for vulnerability lists, obfuscation patterns and attack records.

Each file starts with a header object naming its format and version, followed
by one object per entry/record/flip in order.
"""

import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Tuple

from decoy.attack import AttackRecord
from decoy.errors import FormatError
from decoy.image import BitAddress, WeightCoord, byte_bits
from decoy.obfuscate import DummyLayer, DummyNeurons, Nops, ObfuscationPattern, Record
from decoy.search import CodeJump, SweepTrial, VulnEntry, VulnerabilityList, WeightProvenance

FORMAT_VERSION = 1
VULNS = "decoy-vulns"
PATTERN = "decoy-pattern"
ATTACK = "decoy-attack"


def _write(path: Path, kind: str, header: Dict[str, Any], items: Iterable[Dict[str, Any]]) -> None:
    lines = [json.dumps({"format": kind, "version": FORMAT_VERSION, **header})]
    lines.extend(json.dumps(item) for item in items)
    path.write_text("\n".join(lines) + "\n")


def _read(path: Path, kind: str) -> Tuple[Dict[str, Any], List[Dict[str, Any]]]:
    try:
        rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    except json.JSONDecodeError:
        raise FormatError(f"{path} is not a {kind} file") from None
    if not rows or not all(isinstance(row, dict) for row in rows) or rows[0].get("format") != kind:
        raise FormatError(f"{path} is not a {kind} file")
    if rows[0].get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported {kind} version {rows[0].get('version')}")
    return rows[0], rows[1:]


# ── Vulnerability lists ──────────────────────────────────────────────────────


def _jump_dict(jump: CodeJump) -> Dict[str, Any]:
    return {"offset": jump.offset, "mnemonic": jump.mnemonic, "near": jump.near, "label": jump.label}


def _entry_dict(entry: VulnEntry) -> Dict[str, Any]:
    out: Dict[str, Any] = {"entry": str(entry.address), "score": entry.score}
    prov = entry.provenance
    if isinstance(prov, WeightProvenance):
        out["weight"] = {"layer": prov.coord.layer, "index": list(prov.coord.index)}
        if prov.original is not None:
            layer, index, bias = prov.original
            out["weight"]["original"] = {"layer": layer, "index": list(index), "bias": bias}
    else:
        out["jump"] = _jump_dict(prov)
    return out


def _entry_from(row: Dict[str, Any]) -> VulnEntry:
    address = BitAddress.parse(row["entry"])
    if "weight" in row:
        w = row["weight"]
        original = None
        if "original" in w:
            o = w["original"]
            original = (o["layer"], tuple(o["index"]), o["bias"])
        coord = WeightCoord(w["layer"], tuple(w["index"]))
        prov: Any = WeightProvenance(coord, byte_bits(address.byte_offset), original)
    else:
        prov = CodeJump(**row["jump"])
    return VulnEntry(address, prov, float(row["score"]))


def save_vulns(vl: VulnerabilityList, path: Path) -> None:
    items: List[Dict[str, Any]] = [_entry_dict(e) for e in vl]
    items += [
        {
            "trial": str(t.address),
            "jump": _jump_dict(t.jump),
            "outcome": t.outcome,
            "accuracy": t.accuracy,
            "steps": t.steps,
            "pruned": t.pruned,
        }
        for t in vl.trials
    ]
    _write(path, VULNS, {"level": vl.level, "baseline_accuracy": vl.baseline_accuracy}, items)


def load_vulns(path: Path) -> VulnerabilityList:
    header, rows = _read(path, VULNS)
    entries = tuple(_entry_from(r) for r in rows if "entry" in r)
    trials = tuple(
        SweepTrial(
            CodeJump(**r["jump"]), BitAddress.parse(r["trial"]), r["outcome"], r["accuracy"], r["steps"], r["pruned"]
        )
        for r in rows
        if "trial" in r
    )
    return VulnerabilityList(entries, float(header["baseline_accuracy"]), header["level"], trials)


# ── Obfuscation patterns ─────────────────────────────────────────────────────


def _record_dict(rec: Record) -> Dict[str, Any]:
    if isinstance(rec, DummyLayer):
        return {
            "kind": "dummy-layer",
            "element": rec.element,
            "after": rec.after,
            "layer_kind": rec.kind,
            "seed": rec.seed,
        }
    if isinstance(rec, DummyNeurons):
        return {
            "kind": "dummy-neurons",
            "element": rec.element,
            "layer": rec.layer,
            "n": rec.n,
            "position": rec.position,
            "seed": rec.seed,
        }
    return {"kind": "nops", "offset": rec.offset, "count": rec.count, "seed": rec.seed}


def _record_from(row: Dict[str, Any]) -> Record:
    kind = row.get("kind")
    if kind == "dummy-layer":
        return DummyLayer(row["element"], row["after"], row["layer_kind"], row["seed"])
    if kind == "dummy-neurons":
        return DummyNeurons(row["element"], row["layer"], row["n"], row["position"], row["seed"])
    if kind == "nops":
        return Nops(row["offset"], row["count"], row["seed"])
    raise FormatError(f"unknown pattern record kind '{kind}'")


def save_pattern(pat: ObfuscationPattern, path: Path) -> None:
    header = {
        "prob": pat.prob,
        "seed": pat.seed,
        "retries": pat.generation_retries,
        "attempt_seed": pat.attempt_seed,
        "image_digest": pat.image_digest,
    }
    _write(path, PATTERN, header, (_record_dict(r) for r in pat.records))


def load_pattern(path: Path) -> ObfuscationPattern:
    header, rows = _read(path, PATTERN)
    return ObfuscationPattern(
        records=tuple(_record_from(r) for r in rows),
        prob=float(header["prob"]),
        seed=int(header["seed"]),
        generation_retries=int(header["retries"]),
        image_digest=header["image_digest"],
        attempt_seed=int(header["attempt_seed"]),
    )


# ── Attack records ───────────────────────────────────────────────────────────


def save_record(rec: AttackRecord, path: Path) -> None:
    header = {
        "mode": rec.mode,
        "budget": rec.budget,
        "seed": rec.seed,
        "achieved": rec.achieved,
        "baseline": rec.baseline,
        "source": rec.source,
        "target": rec.target,
        "image_digest": rec.image_digest,
    }
    _write(path, ATTACK, header, ({"flip": str(a)} for a in rec.flips))


def load_record(path: Path) -> AttackRecord:
    header, rows = _read(path, ATTACK)
    return AttackRecord(
        flips=tuple(BitAddress.parse(r["flip"]) for r in rows),
        mode=header["mode"],
        budget=int(header["budget"]),
        achieved=float(header["achieved"]),
        seed=int(header["seed"]),
        source=header["source"],
        target=header["target"],
        baseline=float(header["baseline"]),
        image_digest=header["image_digest"],
    )
