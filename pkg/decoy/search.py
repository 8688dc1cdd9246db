"""Vulnerability search over the weights (gradient ranking) and the code (jump-flip sweep)."""

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterator, List, Optional, Tuple, Union

import numpy as np

from decoy.engine import Dataset, Network, Outcome, compute_gradients, evaluate
from decoy.errors import ImageCorruptError, StageError
from decoy.image import CODE, BitAddress, MemoryImage, WeightCoord, build_image, byte_bits
from decoy.vm import DEFAULT_STEP_BUDGET, VmKernel, program_from_image, run_inference_with_vm

logger = logging.getLogger(__name__)

MODEL = "model"
CODE_LEVEL = "code"
DEFAULT_K = 100
DEFAULT_DROP_TOLERANCE = 0.05

BENIGN, DROP, CRASH, TIMEOUT = "benign", "drop", "crash", "timeout"


@dataclass(frozen=True)
class WeightProvenance:
    coord: WeightCoord
    bits: Tuple[BitAddress, ...]
    original: Optional[Tuple[int, Tuple[int, ...], bool]] = None

    def describe(self) -> str:
        return str(self.coord)


@dataclass(frozen=True)
class CodeJump:
    offset: int
    mnemonic: str
    near: bool
    label: Optional[str] = None

    def describe(self) -> str:
        form = "near" if self.near else "short"
        where = f" {self.label}" if self.label else ""
        return f"{self.mnemonic.upper()}@{self.offset} {form}{where}"


Provenance = Union[WeightProvenance, CodeJump]


@dataclass(frozen=True)
class VulnEntry:
    address: BitAddress
    provenance: Provenance
    score: float


@dataclass(frozen=True)
class SweepTrial:
    """Outcome of flipping one conditional jump during the code sweep."""

    jump: CodeJump
    address: BitAddress
    outcome: str
    accuracy: Optional[float]
    steps: int
    pruned: bool = False


@dataclass(frozen=True)
class VulnerabilityList:
    entries: Tuple[VulnEntry, ...]
    baseline_accuracy: float
    level: str = MODEL
    trials: Tuple[SweepTrial, ...] = ()

    def __post_init__(self):
        scores = [e.score for e in self.entries]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError("vulnerability entries must be sorted by descending score")
        if len({e.address for e in self.entries}) != len(self.entries):
            raise ValueError("vulnerability addresses must be unique")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[VulnEntry]:
        return iter(self.entries)

    def addresses(self) -> List[BitAddress]:
        return [e.address for e in self.entries]

    def address_set(self) -> FrozenSet[BitAddress]:
        return frozenset(self.addresses())

    def stats(self) -> Dict[str, int]:
        """Outcome counts over the jumps clean inference reaches, plus the unreached count."""
        counts = Counter(t.outcome for t in self.trials if not t.pruned)
        out = {name: counts.get(name, 0) for name in (BENIGN, DROP, CRASH, TIMEOUT)}
        out["unreached"] = sum(1 for t in self.trials if t.pruned)
        return out

    def benign_share(self) -> Optional[float]:
        reached = [t for t in self.trials if not t.pruned]
        if not reached:
            return None
        return sum(1 for t in reached if t.outcome == BENIGN) / len(reached)


def rank_vulnerable_weights(net: Network, ds: Dataset, k: int = DEFAULT_K) -> VulnerabilityList:
    """Top-k weights by |∂L/∂W| on the eval split; each contributes its MSB address.

    Ties are broken by (layer, flat index) so the ranking is a total order.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    if not net.layers:
        raise ValueError("network has no layers to rank")
    layout = build_image(net).layout
    baseline = evaluate(net, ds).accuracy or 0.0
    if k == 0:
        return VulnerabilityList((), baseline)
    grads = compute_gradients(net, ds)
    scores = np.concatenate([np.abs(g).ravel() for g in grads.grads]).astype(np.float64)
    layer_ids = np.concatenate([np.full(g.size, i, dtype=np.int64) for i, g in enumerate(grads.grads)])
    flat_ids = np.concatenate([np.arange(g.size, dtype=np.int64) for g in grads.grads])
    order = np.lexsort((flat_ids, layer_ids, -scores))[:k]

    entries = []
    for pos in order:
        layer = int(layer_ids[pos])
        slot = layout.slot(layer)
        index = tuple(int(i) for i in np.unravel_index(int(flat_ids[pos]), slot.weight_shape))
        coord = WeightCoord(layer, index)
        offset = slot.weight_offset + int(flat_ids[pos])
        bits = byte_bits(offset)
        entries.append(VulnEntry(bits[7], WeightProvenance(coord, bits, layout.original(coord)), float(scores[pos])))
    logger.info("ranked %d weights, kept top %d (loss %.4f)", scores.size, len(entries), grads.loss)
    return VulnerabilityList(tuple(entries), baseline)


def _classify(baseline: float, report_accuracy: Optional[float], outcome: Outcome, tolerance: float) -> str:
    if outcome is Outcome.CRASH:
        return CRASH
    if outcome is Outcome.TIMEOUT:
        return TIMEOUT
    return DROP if report_accuracy is not None and report_accuracy < baseline - tolerance else BENIGN


def search_code_vulnerabilities(
    img: MemoryImage,
    ds: Dataset,
    drop_tolerance: float = DEFAULT_DROP_TOLERANCE,
    step_budget: int = DEFAULT_STEP_BUDGET,
    prune_unreached: bool = True,
) -> VulnerabilityList:
    """Flip every conditional jump to its opposite, run inference, restore.

    Only accuracy drops are listed; crashes and timeouts are recorded in
    `trials` but are not critical. Jumps that clean inference never executes
    cannot change behavior and are marked benign without a run when
    `prune_unreached` is set.
    """
    if drop_tolerance <= 0:
        raise ValueError("drop_tolerance must be positive")
    digest = img.digest()
    net = img.network()
    code = img.section(CODE)
    prog = program_from_image(img)
    jumps = prog.conditional_jumps()

    kernel = VmKernel(prog, step_budget, trace=True)
    clean = evaluate(net, ds, kernel)
    if clean.outcome is not Outcome.OK or clean.accuracy is None:
        raise StageError("code-baseline", RuntimeError(f"clean image ends in {clean.outcome.value}"))
    baseline = clean.accuracy
    coverage = kernel.coverage or set()

    payload = bytearray(img.payload)
    trials: List[SweepTrial] = []
    entries: List[VulnEntry] = []
    for ins in jumps:
        jump = CodeJump(ins.offset, ins.opcode.mnemonic, ins.opcode.near, prog.label_at(ins.offset))
        at = code.offset + ins.opcode_byte
        address = BitAddress(at, 0)
        if prune_unreached and ins.offset not in coverage:
            trials.append(SweepTrial(jump, address, BENIGN, baseline, 0, pruned=True))
            continue
        payload[at] ^= 0x01
        report = run_inference_with_vm(img.with_payload(bytes(payload)), ds, step_budget, net=net)
        payload[at] ^= 0x01
        outcome = _classify(baseline, report.accuracy, report.outcome, drop_tolerance)
        trials.append(SweepTrial(jump, address, outcome, report.accuracy, report.steps_executed))
        logger.debug("flip %s -> %s (acc %s)", jump.describe(), outcome, report.accuracy)
        if outcome == DROP:
            entries.append(VulnEntry(address, jump, float(baseline - report.accuracy)))  # type: ignore[operator]

    if hashlib.sha256(payload).hexdigest() != digest:
        raise ImageCorruptError("image hash changed across the jump sweep")
    entries.sort(key=lambda e: (-e.score, e.address))
    result = VulnerabilityList(tuple(entries), baseline, CODE_LEVEL, tuple(trials))
    logger.info("code sweep over %d jumps: %s", len(jumps), result.stats())
    return result
