"""Dummy-operation obfuscation: pattern generation and load-time enforcement.

Every insertion made for a model element (a layer) lands in memory before that
layer, and every NOP run made for a code element (an instruction) lands before
that instruction or before the loop enclosing it, so the element's bytes
always move.
"""

import logging
import time
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from decoy.attack import AdaptiveRangeSpec, adaptive_flip_set, replay
from decoy.engine import CONV2D, LINEAR, NATIVE, RELU, Dataset, Network, Outcome, QuantLayer
from decoy.errors import (
    BoundaryLayerError,
    NonIdempotentActivationError,
    RetriesExhaustedError,
    StaleLocationError,
)
from decoy.image import CODE, WEIGHTS, BitAddress, MemoryImage, build_image
from decoy.rng import SplitMix64, derive_seed
from decoy.search import (
    CODE_LEVEL,
    DEFAULT_DROP_TOLERANCE,
    MODEL,
    CodeJump,
    VulnerabilityList,
    WeightProvenance,
    rank_vulnerable_weights,
    search_code_vulnerabilities,
)
from decoy.vm import DEFAULT_STEP_BUDGET, Program, insert_nops_many, program_from_image

logger = logging.getLogger(__name__)

DEFAULT_PROB = 0.3
DEFAULT_MAX_RETRIES = 32
NEURON_RANGE = (1, 4)
NOP_RANGE = (1, 16)
# largest share of the WEIGHTS section one dummy layer may add
DEFAULT_LAYER_SHARE = 0.05

DUMMY_LINEAR = "linear"
DUMMY_CONV1X1 = "conv1x1"


# ── Records ──────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class DummyLayer:
    """Identity layer inserted after layer `after` (so before element `after + 1`)."""

    element: int
    after: int
    kind: str
    seed: int = 0


@dataclass(frozen=True)
class DummyNeurons:
    """`n` zero units spliced into `layer` before its `position`-th original unit."""

    element: int
    layer: int
    n: int
    position: int
    seed: int = 0


@dataclass(frozen=True)
class Nops:
    """`count` NOPs before the instruction at original code offset `offset`."""

    offset: int
    count: int
    seed: int = 0


Record = Union[DummyLayer, DummyNeurons, Nops]


@dataclass(frozen=True)
class ObfuscationPattern:
    records: Tuple[Record, ...]
    prob: float
    seed: int
    generation_retries: int = 0
    image_digest: str = ""
    attempt_seed: int = 0

    @property
    def model_records(self) -> List[Union[DummyLayer, DummyNeurons]]:
        return [r for r in self.records if not isinstance(r, Nops)]

    @property
    def code_records(self) -> List[Nops]:
        return [r for r in self.records if isinstance(r, Nops)]

    @property
    def nop_total(self) -> int:
        return sum(r.count for r in self.code_records)

    def counts(self) -> Dict[str, int]:
        return {
            "dummy_layers": sum(isinstance(r, DummyLayer) for r in self.records),
            "dummy_neurons": sum(r.n for r in self.records if isinstance(r, DummyNeurons)),
            "nop_sites": len(self.code_records),
            "nops": self.nop_total,
        }


# ── Model insertions ─────────────────────────────────────────────────────────


def _family(layer: QuantLayer) -> str:
    return layer.kind


def insert_dummy_layer(net: Network, after: int, kind: Optional[str] = None) -> Network:
    """Insert an identity layer after layer `after`; outputs stay bit-identical.

    A linear layer gets an n×n identity; a conv layer gets a 1×1 conv whose
    filter d is one-hot on channel d. Quantization is passthrough: weights
    are exactly 1 at scale 1 and the input scale is carried through.
    """
    if not 0 <= after < len(net.layers) - 1:
        raise BoundaryLayerError(f"cannot insert a dummy layer after layer {after}")
    prev = net.layers[after]
    nxt = net.layers[after + 1]
    if prev.activation != RELU:
        raise NonIdempotentActivationError(f"layer {after} has activation '{prev.activation}'")
    expected = DUMMY_CONV1X1 if prev.kind == CONV2D else DUMMY_LINEAR
    kind = kind or expected
    if kind != expected:
        raise ValueError(f"a {kind} dummy cannot follow a {prev.kind} layer")

    width = prev.out_units
    eye = np.eye(width)
    if kind == DUMMY_CONV1X1:
        eye = eye.reshape(width, width, 1, 1)
    quantized = prev.quantized
    dummy = QuantLayer(
        kind=CONV2D if kind == DUMMY_CONV1X1 else LINEAR,
        weights=eye.astype(np.int8 if quantized else np.float32),
        bias=np.zeros(width, dtype=np.int32 if quantized else np.float32),
        in_shape=prev.out_shape if kind == DUMMY_CONV1X1 else (prev.out_size,),
        activation=RELU,
        backend=NATIVE,
        scale_w=1.0 if quantized else None,
        scale_in=nxt.scale_in,
        scale_out=nxt.scale_in,
        act_max=nxt.act_max,
        origin=-1,
        row_origin=(-1,) * width,
        col_origin=(-1,) * width,
    )
    layers = list(net.layers)
    layers.insert(after + 1, dummy)
    return net.with_layers(layers)


def _current_position(layer: QuantLayer, position: int) -> int:
    """Index just before the `position`-th non-dummy unit (or the end)."""
    real = [i for i, origin in enumerate(layer.rows()) if origin >= 0]
    if position >= len(real):
        return layer.out_units
    return real[position]


def insert_dummy_neurons(net: Network, layer: int, n: int, position: Optional[int] = None) -> Network:
    """Splice `n` zero units into `layer` and matching zero inputs into `layer + 1`."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if not 0 <= layer < len(net.layers) - 1:
        raise BoundaryLayerError(f"layer {layer} has no following layer to absorb dummy neurons")
    cur, nxt = net.layers[layer], net.layers[layer + 1]
    if _family(cur) != _family(nxt):
        raise BoundaryLayerError(f"layers {layer} and {layer + 1} straddle a flatten boundary")
    at = cur.out_units if position is None else position
    if not 0 <= at <= cur.out_units:
        raise ValueError(f"position {at} outside 0..{cur.out_units}")

    rows = np.zeros((n,) + cur.weights.shape[1:], dtype=cur.weights.dtype)
    cols = np.zeros((nxt.weights.shape[0], n) + nxt.weights.shape[2:], dtype=nxt.weights.dtype)
    row_origin = list(cur.rows())
    col_origin = list(nxt.cols())
    widened = replace(
        cur,
        weights=np.concatenate([cur.weights[:at], rows, cur.weights[at:]], axis=0),
        bias=np.concatenate([cur.bias[:at], np.zeros(n, dtype=cur.bias.dtype), cur.bias[at:]]),
        row_origin=tuple(row_origin[:at] + [-1] * n + row_origin[at:]),
    )
    in_shape = (nxt.in_shape[0] + n,) + tuple(nxt.in_shape[1:])
    fed = replace(
        nxt,
        weights=np.concatenate([nxt.weights[:, :at], cols, nxt.weights[:, at:]], axis=1),
        in_shape=in_shape,
        col_origin=tuple(col_origin[:at] + [-1] * n + col_origin[at:]),
    )
    layers = list(net.layers)
    layers[layer] = widened
    layers[layer + 1] = fed
    return net.with_layers(layers)


def insert_nops(prog: Program, at: int, count: int) -> Program:
    if count < 1:
        raise ValueError("count must be at least 1")
    return insert_nops_many(prog, {at: count}).program


# ── Enforcer ─────────────────────────────────────────────────────────────────


def _apply_model(net: Network, records: Sequence[Union[DummyLayer, DummyNeurons]]) -> Network:
    # descending element order keeps lower layer indices valid
    for rec in sorted(records, key=lambda r: r.element, reverse=True):
        if isinstance(rec, DummyLayer):
            net = insert_dummy_layer(net, rec.after, rec.kind)
        else:
            position = _current_position(net.layers[rec.layer], rec.position)
            net = insert_dummy_neurons(net, rec.layer, rec.n, position)
    return net


def apply_pattern(img: MemoryImage, pat: ObfuscationPattern) -> MemoryImage:
    """Rebuild `img` with every record of `pat` applied; utility is preserved exactly."""
    if pat.image_digest and pat.image_digest != img.digest():
        raise StaleLocationError("pattern was generated for a different image")
    net = _apply_model(img.network(), pat.model_records)
    prog = program_from_image(img)
    if pat.code_records:
        prog = insert_nops_many(prog, {r.offset: r.count for r in pat.code_records}).program
    return build_image(net, prog)


class Relocator:
    """Maps addresses of `img` to where the same byte lives once `pat` is applied."""

    def __init__(self, img: MemoryImage, pat: ObfuscationPattern, obf: Optional[MemoryImage] = None):
        self.img = img
        self.obf = obf if obf is not None else apply_pattern(img, pat)
        self._prog = program_from_image(img)
        self._starts = [ins.offset for ins in self._prog.instructions()] if len(self._prog) else []
        self._offsets = insert_nops_many(self._prog, {r.offset: r.count for r in pat.code_records}).offsets

    def __call__(self, address: BitAddress) -> Optional[BitAddress]:
        code = self.img.section(CODE)
        if address.byte_offset in code:
            rel = address.byte_offset - code.offset
            start = max((s for s in self._starts if s <= rel), default=None)
            if start is None:
                return None
            return BitAddress(self.obf.section(CODE).offset + self._offsets[start] + (rel - start), address.bit_index)

        coord = self.img.layout.inverse(address.byte_offset)
        if coord is None or coord.bias:
            return None
        original = self.img.layout.original(coord)
        if original is None:
            return None
        layer, index, _ = original
        for slot in self.obf.layout.slots:
            if slot.origin != layer:
                continue
            row = slot.row_origin.index(index[0])
            col = slot.col_origin.index(index[1])
            offset = slot.weight_offset + int(np.ravel_multi_index((row, col) + tuple(index[2:]), slot.weight_shape))
            return BitAddress(offset, address.bit_index)
        return None


def relocate_address(img: MemoryImage, pat: ObfuscationPattern, address: BitAddress) -> Optional[BitAddress]:
    """Where the weight or instruction byte at `address` lives once `pat` is applied."""
    return Relocator(img, pat)(address)


# ── Pattern generation ───────────────────────────────────────────────────────


def _as_lists(vuln: Union[VulnerabilityList, Iterable[VulnerabilityList]]) -> List[VulnerabilityList]:
    return [vuln] if isinstance(vuln, VulnerabilityList) else list(vuln)


def _vulnerable_elements(lists: Sequence[VulnerabilityList]) -> Tuple[Dict[int, int], Set[int]]:
    """Vulnerable layers (with their first vulnerable row) and instruction offsets."""
    layers: Dict[int, int] = {}
    sites: Set[int] = set()
    for vl in lists:
        for entry in vl:
            prov = entry.provenance
            if isinstance(prov, WeightProvenance):
                row = prov.coord.index[0]
                layers[prov.coord.layer] = min(row, layers.get(prov.coord.layer, row))
            elif isinstance(prov, CodeJump):
                sites.add(prov.offset)
    return layers, sites


def dummy_layer_bytes(prev: QuantLayer) -> int:
    """Image bytes of the identity layer that would follow `prev`."""
    width = prev.out_units
    return width * width + 4 * width


def _model_record(
    net: Network, element: int, first_row: Optional[int], seed: int, layer_budget: int
) -> Optional[Record]:
    rng = SplitMix64(seed)
    if element == 0:
        if len(net.layers) < 2 or _family(net.layers[0]) != _family(net.layers[1]):
            return None
        top = first_row if first_row is not None else net.layers[0].out_units
        return DummyNeurons(0, 0, rng.randint(*NEURON_RANGE), rng.randint(0, top), seed)
    prev, cur = net.layers[element - 1], net.layers[element]
    options = []
    if prev.activation == RELU and dummy_layer_bytes(prev) <= layer_budget:
        options.append("layer")
    if _family(prev) == _family(cur):
        options.append("neurons")
    if not options:
        return None
    choice = rng.choice(options)
    if choice == "layer":
        kind = DUMMY_CONV1X1 if prev.kind == CONV2D else DUMMY_LINEAR
        return DummyLayer(element, element - 1, kind, seed)
    return DummyNeurons(element, element - 1, rng.randint(*NEURON_RANGE), rng.randint(0, prev.out_units), seed)


def _loop_regions(prog: Program) -> List[Tuple[int, int]]:
    """Merged [head, end) byte ranges closed by backward jumps."""
    spans = sorted(
        (ins.target, ins.end) for ins in prog.instructions() if ins.target is not None and ins.target <= ins.offset
    )
    merged: List[Tuple[int, int]] = []
    for lo, hi in spans:
        if merged and lo <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], hi))
        else:
            merged.append((lo, hi))
    return merged


def nop_anchors(prog: Program) -> Dict[int, int]:
    """Instruction offset -> offset of the instruction that receives its NOP run.

    Straight-line instructions anchor to themselves. An instruction inside a
    loop anchors to the instruction just before the outermost loop, so the run
    executes once per call while still displacing the whole loop. Loop heads
    count as inside: jumps land on the start of a NOP run.
    """
    instructions = prog.instructions()
    starts = [ins.offset for ins in instructions]
    anchors: Dict[int, int] = {}
    regions = _loop_regions(prog)
    for ins in instructions:
        region = next((r for r in regions if r[0] <= ins.offset < r[1]), None)
        if region is None:
            anchors[ins.offset] = ins.offset
            continue
        before = [s for s in starts if s < region[0]]
        anchors[ins.offset] = before[-1] if before else region[0]
    return anchors


def draw_records(
    img: MemoryImage,
    lists: Sequence[VulnerabilityList],
    prob: float,
    seed: int,
    layer_share: float = DEFAULT_LAYER_SHARE,
) -> Tuple[Record, ...]:
    """One walk over model then code elements; vulnerable ones always get an insertion.

    Only the sections the lists cover are walked (both when there are no
    lists). Dummy layers are legal only when they cost at most `layer_share`
    of the WEIGHTS section; optional NOP runs go at straight-line sites only.
    """
    net = img.network()
    prog = program_from_image(img)
    vuln_layers, vuln_sites = _vulnerable_elements(lists)
    levels = {vl.level for vl in lists} or {MODEL, CODE_LEVEL}
    layer_budget = int(layer_share * img.section(WEIGHTS).length)
    rng = SplitMix64(seed)
    records: List[Record] = []
    if MODEL in levels:
        for element in range(len(net.layers)):
            chosen = rng.random() < prob
            if element not in vuln_layers and not chosen:
                continue
            rec = _model_record(
                net, element, vuln_layers.get(element), derive_seed(seed, MODEL, element), layer_budget
            )
            if rec is None:
                if element in vuln_layers:
                    logger.warning("vulnerable layer %d admits no dummy insertion", element)
                continue
            records.append(rec)
    if CODE_LEVEL in levels and len(prog):
        anchors = nop_anchors(prog)
        runs: Dict[int, Nops] = {}
        for ins in prog.instructions():
            chosen = rng.random() < prob
            anchor = anchors[ins.offset]
            if ins.offset not in vuln_sites and not (chosen and anchor == ins.offset):
                continue
            if anchor not in runs:
                rec_seed = derive_seed(seed, CODE_LEVEL, anchor)
                runs[anchor] = Nops(anchor, SplitMix64(rec_seed).randint(*NOP_RANGE), rec_seed)
        records.extend(runs[offset] for offset in sorted(runs))
    return tuple(records)


def generate_pattern(
    img: MemoryImage,
    vuln: Union[VulnerabilityList, Iterable[VulnerabilityList]],
    prob: float = DEFAULT_PROB,
    seed: int = 0,
    max_retries: int = DEFAULT_MAX_RETRIES,
    ds: Optional[Dataset] = None,
    drop_tolerance: float = DEFAULT_DROP_TOLERANCE,
    step_budget: int = DEFAULT_STEP_BUDGET,
    research: bool = True,
    layer_share: float = DEFAULT_LAYER_SHARE,
    windows: Sequence[Sequence[AdaptiveRangeSpec]] = (),
) -> ObfuscationPattern:
    """Draw insertion records until the layout hides every listed address.

    A draw is rejected when a listed address stays where it was. With `ds`
    each listed code address, and each group of `windows` around it, is
    replayed on the candidate and must crash, time out or keep accuracy within
    `drop_tolerance`; with `research` the searchers are re-run as well and the
    new vulnerable addresses must avoid the old ones.
    """
    if not 0.0 <= prob <= 1.0:
        raise ValueError("prob must lie in [0, 1]")
    lists = _as_lists(vuln)
    old = frozenset().union(*(vl.address_set() for vl in lists)) if lists else frozenset()
    digest = img.digest()
    started = time.perf_counter()
    for attempt in range(max_retries):
        attempt_seed = seed if attempt == 0 else derive_seed(seed, "retry", attempt)
        records = draw_records(img, lists, prob, attempt_seed, layer_share)
        pattern = ObfuscationPattern(records, prob, seed, attempt, digest, attempt_seed)
        obf = apply_pattern(img, pattern)
        stuck = stuck_addresses(img, pattern, old, obf)
        reason = f"{len(stuck)} addresses did not move" if stuck else None
        if reason is None and ds is not None:
            reason = _unsafe_replay(obf, lists, ds, drop_tolerance, step_budget, windows)
            if reason is None and research:
                common = old & _research(obf, lists, ds, drop_tolerance, step_budget)
                reason = f"{len(common)} addresses still vulnerable" if common else None
        if reason is None:
            logger.info(
                "pattern accepted after %d retries (%d records, %.2fs)",
                attempt,
                len(pattern.records),
                time.perf_counter() - started,
            )
            return pattern
        logger.debug("attempt %d rejected: %s", attempt, reason)
    raise RetriesExhaustedError(f"no accepted layout within {max_retries} attempts")


def stuck_addresses(
    img: MemoryImage, pattern: ObfuscationPattern, addresses: Iterable[BitAddress], obf: Optional[MemoryImage] = None
) -> Set[BitAddress]:
    """Addresses whose byte no longer exists after `pattern`, or still sits at the same offset."""
    relocate = Relocator(img, pattern, obf)
    return {a for a in addresses if relocate(a) in (None, a)}


def _unsafe_replay(
    obf: MemoryImage,
    lists: Sequence[VulnerabilityList],
    ds: Dataset,
    tolerance: float,
    step_budget: int,
    windows: Sequence[Sequence[AdaptiveRangeSpec]],
) -> Optional[str]:
    for vl in lists:
        if vl.level != CODE_LEVEL:
            continue
        floor = vl.baseline_accuracy - tolerance
        for a in vl.addresses():
            flip_sets = [(a,)]
            for group in windows:
                chosen = set()
                for spec in group:
                    chosen.update(adaptive_flip_set([a], spec, CODE_LEVEL, obf.size))
                flip_sets.append(tuple(sorted(chosen)))
            for flips in flip_sets:
                report = replay(obf, flips, ds, step_budget).report
                if report.outcome is Outcome.OK and (report.accuracy or 0.0) < floor:
                    return f"{len(flips)} flips around {a} degrade accuracy to {report.accuracy:.4f}"
    return None


def _research(
    obf: MemoryImage, lists: Sequence[VulnerabilityList], ds: Dataset, drop_tolerance: float, step_budget: int
) -> Set[BitAddress]:
    found: Set[BitAddress] = set()
    for vl in lists:
        if vl.level == MODEL:
            found |= rank_vulnerable_weights(obf.network(), ds, len(vl)).address_set()
        else:
            found |= search_code_vulnerabilities(obf, ds, drop_tolerance, step_budget).address_set()
    return found
