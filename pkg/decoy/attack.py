"""Attacker simulators: greedy bit search on the clean image, replay, adaptive ranges."""

import logging
from dataclasses import dataclass, replace
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from decoy.engine import (
    VM_KERNEL,
    Dataset,
    EvalReport,
    Network,
    Outcome,
    as_batch,
    attack_success_rate,
    batch_loss,
    compute_gradients,
    evaluate,
    forward,
    predict,
)
from decoy.errors import OutOfRangeError
from decoy.image import CODE, BitAddress, MemoryImage, weight_byte_count
from decoy.rng import SplitMix64, derive_seed
from decoy.search import VulnerabilityList
from decoy.vm import DEFAULT_STEP_BUDGET, run_inference_with_vm

logger = logging.getLogger(__name__)

UNTARGETED = "untargeted"
TARGETED = "targeted"
CANDIDATE_POOL = 16
TARGETED_LAMBDA = 1.0

CODE_LEVEL = "code"
MODEL_LEVEL = "model"
SEPARATE = "separate"
UNION = "union"


@dataclass(frozen=True)
class AttackRound:
    """One greedy round: the candidates tried and the objective each reached."""

    candidates: Tuple[BitAddress, ...]
    scores: Tuple[float, ...]
    chosen: int


@dataclass(frozen=True)
class AttackRecord:
    flips: Tuple[BitAddress, ...]
    mode: str
    budget: int
    achieved: float
    seed: int = 0
    source: Optional[int] = None
    target: Optional[int] = None
    baseline: float = 0.0
    image_digest: str = ""
    rounds: Tuple[AttackRound, ...] = ()

    def __post_init__(self):
        if len(self.flips) > self.budget:
            raise ValueError(f"{len(self.flips)} flips exceed the budget of {self.budget}")

    @property
    def targeted(self) -> Optional[Tuple[int, int]]:
        if self.mode == TARGETED and self.source is not None and self.target is not None:
            return self.source, self.target
        return None


@dataclass(frozen=True)
class AdaptiveRangeSpec:
    x1: int = 0
    x2: int = 0
    al: int = 16
    x: int = 0

    def __post_init__(self):
        if self.al <= 0:
            raise ValueError("alignment must be positive")
        if min(self.x1, self.x2, self.x) < 0:
            raise ValueError("range parameters must be non-negative")


def _flip_value(weights: np.ndarray, flat: int, bit: int) -> np.ndarray:
    out = weights.copy()
    raw = out.reshape(-1).view(np.uint8)
    raw[flat] ^= np.uint8(1 << bit)
    return out


def _with_weights(net: Network, layer: int, weights: np.ndarray) -> Network:
    layers = list(net.layers)
    layers[layer] = replace(layers[layer], weights=weights)
    return net.with_layers(layers)


def _dequantized(net: Network) -> List[np.ndarray]:
    return [layer.dequantized().astype(np.float64) for layer in net.layers]


def untargeted_bfa(
    img: MemoryImage,
    ds: Dataset,
    budget: int,
    stop_acc: float = 0.0,
    seed: int = 0,
    pool: int = CANDIDATE_POOL,
) -> AttackRecord:
    """Progressive gradient-guided bit search on the clean image.

    Each round re-ranks weights by |∂L/∂W|, tries every bit of the `pool`
    top-ranked bytes not flipped yet, and commits the flip that maximizes the
    attack-batch loss.
    """
    if budget < 0:
        raise ValueError("budget must be non-negative")
    batch = as_batch(ds)
    net = img.network()
    layout = img.layout
    accuracy = evaluate(net, batch).accuracy or 0.0
    baseline = accuracy
    flips: List[BitAddress] = []
    rounds: List[AttackRound] = []
    flipped_bytes = set()
    while len(flips) < budget and accuracy > stop_acc:
        grads = compute_gradients(net, batch)
        scores = np.concatenate([np.abs(g).ravel() for g in grads.grads]).astype(np.float64)
        layer_ids = np.concatenate([np.full(g.size, i) for i, g in enumerate(grads.grads)])
        flat_ids = np.concatenate([np.arange(g.size) for g in grads.grads])
        order = np.lexsort((flat_ids, layer_ids, -scores))

        candidates: List[Tuple[int, int, BitAddress]] = []
        picked = 0
        for pos in order:
            offset = layout.slots[int(layer_ids[pos])].weight_offset + int(flat_ids[pos])
            if offset in flipped_bytes:
                continue
            candidates.extend((int(layer_ids[pos]), int(flat_ids[pos]), BitAddress(offset, bit)) for bit in range(8))
            picked += 1
            if picked == pool:
                break
        if not candidates:
            break

        base_weights = _dequantized(net)
        losses = []
        for layer, flat, address in candidates:
            trial = list(base_weights)
            flipped = _flip_value(net.layers[layer].weights, flat, address.bit_index)
            trial[layer] = replace(net.layers[layer], weights=flipped).dequantized().astype(np.float64)
            losses.append(batch_loss(net, batch, trial))
        best = int(np.argmax(losses))
        layer, flat, address = candidates[best]
        net = _with_weights(net, layer, _flip_value(net.layers[layer].weights, flat, address.bit_index))
        flips.append(address)
        flipped_bytes.add(address.byte_offset)
        rounds.append(AttackRound(tuple(c[2] for c in candidates), tuple(losses), best))
        accuracy = evaluate(net, batch).accuracy or 0.0
        logger.debug("flip %d at %s: loss %.4f, accuracy %.4f", len(flips), address, losses[best], accuracy)

    logger.info("untargeted attack: %d flips, accuracy %.4f -> %.4f", len(flips), baseline, accuracy)
    return AttackRecord(
        tuple(flips),
        UNTARGETED,
        budget,
        accuracy,
        seed,
        baseline=baseline,
        image_digest=img.digest(),
        rounds=tuple(rounds),
    )


def _split(net: Network) -> Tuple[Network, Network]:
    head = Network(net.layers[:-1], net.input_dim, net.n_classes)
    last = net.layers[-1]
    return head, Network((last,), last.in_size, net.n_classes)


def _targeted_objective(
    logits: np.ndarray, labels: np.ndarray, source: int, target: int, other_base: float, lam: float
) -> Tuple[float, float]:
    predictions = predict(logits)
    asr = attack_success_rate(predictions, labels, source, target)
    others = labels != source
    other_acc = float(np.mean(predictions[others] == labels[others])) if others.any() else 0.0
    src = logits[labels == source]
    if len(src):
        rest = np.delete(src, target, axis=1)
        margin = float(np.mean(src[:, target] - rest.max(axis=1)))
    else:
        margin = 0.0
    return asr - lam * max(0.0, other_base - other_acc), margin


def targeted_bfa(
    img: MemoryImage,
    ds: Dataset,
    source: int,
    target: int,
    budget: int,
    seed: int = 0,
    lam: float = TARGETED_LAMBDA,
) -> AttackRecord:
    """Greedy search over every bit of the final layer for (source → target) misclassification.

    The objective is ASR minus `lam` times the accuracy lost on other classes;
    ties go to the larger mean target margin on source samples.
    """
    if source == target:
        raise ValueError("source and target classes must differ")
    if budget < 0:
        raise ValueError("budget must be non-negative")
    batch = as_batch(ds)
    net = img.network()
    last = len(net.layers) - 1
    slot = img.layout.slot(last)
    head, tail = _split(net)
    features = forward(head, batch.x) if last > 0 else batch.x.astype(np.float32)

    logits = forward(tail, features)
    others = batch.y != source
    other_base = float(np.mean(predict(logits)[others] == batch.y[others])) if others.any() else 0.0
    baseline = attack_success_rate(predict(logits), batch.y, source, target)
    asr = baseline
    weights = tail.layers[0].weights
    flips: List[BitAddress] = []
    used = set()
    while len(flips) < budget and asr < 1.0:
        best_key: Optional[Tuple[float, float]] = None
        best_choice = None
        for flat in range(weights.size):
            for bit in range(8):
                if (flat, bit) in used:
                    continue
                trial = _with_weights(tail, 0, _flip_value(weights, flat, bit))
                key = _targeted_objective(forward(trial, features), batch.y, source, target, other_base, lam)
                if best_key is None or key > best_key:
                    best_key, best_choice = key, (flat, bit)
        if best_choice is None:
            break
        flat, bit = best_choice
        weights = _flip_value(weights, flat, bit)
        tail = _with_weights(tail, 0, weights)
        used.add(best_choice)
        flips.append(BitAddress(slot.weight_offset + flat, bit))
        asr = attack_success_rate(predict(forward(tail, features)), batch.y, source, target)
        logger.debug("targeted flip %d at %s: ASR %.4f", len(flips), flips[-1], asr)

    logger.info("targeted attack %d->%d: %d flips, ASR %.4f -> %.4f", source, target, len(flips), baseline, asr)
    return AttackRecord(
        tuple(flips), TARGETED, budget, asr, seed, source, target, baseline=baseline, image_digest=img.digest()
    )


def code_attack(
    img: MemoryImage,
    vuln: VulnerabilityList,
    ds: Dataset,
    budget: int = 1,
    seed: int = 0,
    step_budget: int = DEFAULT_STEP_BUDGET,
) -> AttackRecord:
    """Flip the `budget` most damaging jumps found by the code sweep."""
    flips = tuple(vuln.addresses()[:budget])
    result = replay(img, flips, ds, step_budget=step_budget)
    achieved = result.report.accuracy if result.report.accuracy is not None else 0.0
    return AttackRecord(
        flips, UNTARGETED, budget, achieved, seed, baseline=vuln.baseline_accuracy, image_digest=img.digest()
    )


class ReplayResult(NamedTuple):
    report: EvalReport
    out_of_range: Tuple[BitAddress, ...]


def _uses_vm(img: MemoryImage) -> bool:
    return img.section(CODE).length > 0 and any(s.backend == VM_KERNEL for s in img.layout.slots)


def replay(
    img: MemoryImage,
    rec: Union[AttackRecord, Iterable[BitAddress]],
    ds: Dataset,
    step_budget: int = DEFAULT_STEP_BUDGET,
    native: bool = False,
) -> ReplayResult:
    """Apply recorded flips to `img` as raw addresses and evaluate the result.

    Addresses beyond the payload are collected rather than raised. `native`
    skips the VM even when the image has VM-backed layers.
    """
    flips = rec.flips if isinstance(rec, AttackRecord) else tuple(rec)
    targeted = rec.targeted if isinstance(rec, AttackRecord) else None
    payload = bytearray(img.payload)
    missed: List[BitAddress] = []
    for a in flips:
        if a.byte_offset >= len(payload):
            missed.append(a)
            continue
        payload[a.byte_offset] ^= 1 << a.bit_index
    if missed:
        logger.warning("%s", OutOfRangeError(f"{len(missed)} addresses beyond the {len(payload)}-byte payload"))
    hit = img.with_payload(bytes(payload))
    if not native and _uses_vm(hit):
        report = run_inference_with_vm(hit, ds, step_budget, targeted=targeted)
    else:
        report = evaluate(hit.network(), ds, targeted=targeted)
    return ReplayResult(report, tuple(missed))


def adaptive_flip_set(
    rec: Union[AttackRecord, Iterable[BitAddress]],
    spec: AdaptiveRangeSpec,
    level: str,
    payload_len: Optional[int] = None,
) -> Tuple[BitAddress, ...]:
    """Every bit of every byte in the widened window around each recorded address."""
    flips = rec.flips if isinstance(rec, AttackRecord) else tuple(rec)
    if level == CODE_LEVEL:
        lo_pad, hi_pad = -spec.x1 + spec.x2 * spec.al, spec.x1 + spec.x2 * spec.al
    elif level == MODEL_LEVEL:
        lo_pad, hi_pad = -spec.x, spec.x
    else:
        raise ValueError(f"unknown level '{level}'")
    limit = payload_len - 1 if payload_len is not None else None
    chosen = set()
    for a in flips:
        lo = max(0, a.byte_offset + lo_pad)
        hi = a.byte_offset + hi_pad if limit is None else min(limit, a.byte_offset + hi_pad)
        chosen.update(range(lo, hi + 1))
    return tuple(BitAddress(byte, bit) for byte in sorted(chosen) for bit in range(8))


@dataclass(frozen=True)
class AdaptiveTrial:
    level: str
    x1: int
    x2: Optional[int]
    x: int
    flips: int
    outcome: Outcome
    accuracy: Optional[float]


def adaptive_sweep(
    img: MemoryImage,
    rec: Union[AttackRecord, Sequence[BitAddress]],
    ds: Dataset,
    level: str,
    radii: Sequence[int],
    shifts: Sequence[int] = (0, 1, 2),
    al: int = 16,
    mode: str = SEPARATE,
    step_budget: int = DEFAULT_STEP_BUDGET,
) -> List[AdaptiveTrial]:
    """Replay widened flip windows for each radius (and alignment shift at the code level).

    `radii` are x1 values at the code level and x values at the model level. In
    union mode the windows of all shifts for one radius are flipped together.
    """
    if mode not in (SEPARATE, UNION):
        raise ValueError(f"unknown mode '{mode}'")
    trials: List[AdaptiveTrial] = []
    for radius in radii:
        if level == MODEL_LEVEL:
            groups: List[Tuple[Optional[int], Tuple[BitAddress, ...]]] = [
                (None, adaptive_flip_set(rec, AdaptiveRangeSpec(x=radius, al=al), level, img.size))
            ]
        else:
            sets = [
                (s, adaptive_flip_set(rec, AdaptiveRangeSpec(x1=radius, x2=s, al=al), level, img.size)) for s in shifts
            ]
            groups = sets if mode == SEPARATE else [(None, tuple(sorted(set().union(*(f for _, f in sets)))))]
        for shift, flips in groups:
            result = replay(img, flips, ds, step_budget).report
            x1, x = (radius, 0) if level == CODE_LEVEL else (0, radius)
            trials.append(AdaptiveTrial(level, x1, shift, x, len(flips), result.outcome, result.accuracy))
            logger.debug("adaptive %s radius %d shift %s: %s", level, radius, shift, result.outcome.value)
    return trials


@dataclass(frozen=True)
class RandomFlipTrial:
    seed: int
    flips: Tuple[BitAddress, ...]
    accuracy: float
    drop: float


def random_flip_trials(
    img: MemoryImage, ds: Dataset, k: int = 20, trials: int = 100, seed: int = 0
) -> List[RandomFlipTrial]:
    """Flip `k` uniformly random weight bits per trial and measure the accuracy change."""
    weight_bytes = weight_byte_count(img)
    if weight_bytes == 0:
        raise ValueError("image holds no weights")
    baseline = evaluate(img.network(), ds).accuracy or 0.0
    out = []
    for t in range(trials):
        trial_seed = derive_seed(seed, "random-flip", t)
        rng = SplitMix64(trial_seed)
        flips = tuple(BitAddress(rng.randint(0, weight_bytes - 1), rng.randint(0, 7)) for _ in range(k))
        # weight flips leave the CODE section intact
        report = replay(img, flips, ds, native=True).report
        accuracy = report.accuracy if report.accuracy is not None else 0.0
        out.append(RandomFlipTrial(trial_seed, flips, accuracy, baseline - accuracy))
    return out
