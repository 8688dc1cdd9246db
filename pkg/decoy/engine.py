"""Deterministic int8 micro-network: data, training, quantization, inference, gradients.

All float inference runs through `_linear` / `_conv`, which accumulate over the
input axis in a fixed sequential order. That order is what lets dummy layers and
dummy neurons reproduce the original logits bit for bit.
"""

import logging
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from decoy.errors import DegenerateLayerError, FormatError, NonFiniteError
from decoy.rng import SplitMix64, derive_seed

logger = logging.getLogger(__name__)

LINEAR = "linear"
CONV2D = "conv2d"
RELU = "relu"
NONE = "none"
NATIVE = "native"
VM_KERNEL = "vm"

NOISE_SIGMA = 0.35
INT8_MAX = 127
SAT_HI = 1 << 30
SAT_LO = -(1 << 30)

MODEL_MAGIC = b"BANN"
MODEL_VERSION = 2


class Outcome(str, Enum):
    OK = "ok"
    CRASH = "crash"
    TIMEOUT = "timeout"


# ── Data ─────────────────────────────────────────────────────────────────────


@dataclass(frozen=True, eq=False)
class Batch:
    """A slice of a dataset: float32 features and integer labels."""

    x: np.ndarray
    y: np.ndarray
    n_classes: int

    def __len__(self) -> int:
        return int(self.y.shape[0])

    def take(self, index: Union[Sequence[int], np.ndarray]) -> "Batch":
        index = np.asarray(index, dtype=np.int64)
        return Batch(self.x[index], self.y[index], self.n_classes)


@dataclass(frozen=True, eq=False)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    n_classes: int
    seed: int
    eval_mask: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.x.shape[1])

    @property
    def train(self) -> Batch:
        keep = ~self.eval_mask
        return Batch(self.x[keep], self.y[keep], self.n_classes)

    @property
    def eval(self) -> Batch:
        return Batch(self.x[self.eval_mask], self.y[self.eval_mask], self.n_classes)

    def __len__(self) -> int:
        return int(self.y.shape[0])


def as_batch(data: Union[Dataset, Batch]) -> Batch:
    """Datasets evaluate on their eval split; batches are used as given."""
    return data.eval if isinstance(data, Dataset) else data


def _class_directions(rng: SplitMix64, n_classes: int, dim: int) -> np.ndarray:
    raw = np.array(rng.normals(n_classes * dim), dtype=np.float64).reshape(n_classes, dim)
    directions = np.zeros_like(raw)
    for c in range(n_classes):
        v = raw[c].copy()
        if n_classes <= dim:
            for prev in range(c):
                v -= np.dot(v, directions[prev]) * directions[prev]
        directions[c] = v / np.linalg.norm(v)
    return directions


def generate_dataset(seed: int, n_per_class: int, n_classes: int, dim: int) -> Dataset:
    """Gaussian blobs around seeded unit directions, split 80/20 by a seeded shuffle."""
    if n_classes < 2 or dim < 2:
        raise ValueError("need n_classes >= 2 and dim >= 2")
    rng = SplitMix64(derive_seed(seed, "dataset"))
    centers = _class_directions(rng.derive("centers"), n_classes, dim)
    noise_rng = rng.derive("noise")

    n = n_per_class * n_classes
    labels = np.repeat(np.arange(n_classes, dtype=np.int64), n_per_class)
    noise = np.array(noise_rng.normals(n * dim), dtype=np.float64).reshape(n, dim)
    features = (centers[labels] + NOISE_SIGMA * noise).astype(np.float32)

    order = rng.derive("split").permutation(n)
    eval_mask = np.zeros(n, dtype=bool)
    for position, index in enumerate(order):
        if position % 5 == 4:
            eval_mask[index] = True
    return Dataset(features, labels, n_classes, seed, eval_mask)


# ── Network ──────────────────────────────────────────────────────────────────


@dataclass(frozen=True, eq=False)
class QuantLayer:
    """One linear or conv layer; float32 while training, int8 once quantized.

    `origin`, `row_origin` and `col_origin` name the original layer and units each
    row/column came from; dummy elements carry -1.
    """

    kind: str
    weights: np.ndarray
    bias: np.ndarray
    in_shape: Tuple[int, ...]
    activation: str = RELU
    backend: str = NATIVE
    scale_w: Optional[float] = None
    scale_in: float = 1.0
    scale_out: float = 1.0
    act_max: float = 1.0
    origin: int = -1
    row_origin: Optional[Tuple[int, ...]] = None
    col_origin: Optional[Tuple[int, ...]] = None

    @property
    def quantized(self) -> bool:
        return self.scale_w is not None

    @property
    def out_units(self) -> int:
        return int(self.weights.shape[0])

    @property
    def in_units(self) -> int:
        return int(self.weights.shape[1])

    @property
    def in_size(self) -> int:
        return int(np.prod(self.in_shape))

    @property
    def out_shape(self) -> Tuple[int, ...]:
        if self.kind == CONV2D:
            _, h, w = self.in_shape
            k1, k2 = self.weights.shape[2:]
            return (self.out_units, h - k1 + 1, w - k2 + 1)
        return (self.out_units,)

    @property
    def out_size(self) -> int:
        return int(np.prod(self.out_shape))

    def rows(self) -> Tuple[int, ...]:
        return self.row_origin if self.row_origin is not None else tuple(range(self.out_units))

    def cols(self) -> Tuple[int, ...]:
        return self.col_origin if self.col_origin is not None else tuple(range(self.in_units))

    def dequantized(self) -> np.ndarray:
        if self.scale_w is None:
            return self.weights.astype(np.float32)
        return self.weights.astype(np.float32) * np.float32(self.scale_w)

    def bias_fp(self) -> np.ndarray:
        if self.scale_w is None:
            return self.bias.astype(np.float32)
        return (self.bias.astype(np.float64) * (self.scale_w * self.scale_in)).astype(np.float32)


@dataclass(frozen=True, eq=False)
class Network:
    layers: Tuple[QuantLayer, ...]
    input_dim: int
    n_classes: int
    meta: Mapping[str, float] = field(default_factory=dict)

    @property
    def quantized(self) -> bool:
        return all(layer.quantized for layer in self.layers)

    @property
    def weight_count(self) -> int:
        return sum(int(layer.weights.size) for layer in self.layers)

    def with_layers(self, layers: Sequence[QuantLayer]) -> "Network":
        return replace(self, layers=tuple(layers))

    def validate(self) -> None:
        size = self.input_dim
        for i, layer in enumerate(self.layers):
            if layer.in_size != size:
                raise ValueError(f"layer {i} expects {layer.in_size} inputs, previous layer gives {size}")
            if layer.kind == CONV2D and layer.weights.shape[1] != layer.in_shape[0]:
                raise ValueError(f"layer {i} channel count does not match its input shape")
            if layer.backend == VM_KERNEL and layer.kind != LINEAR:
                raise ValueError(f"layer {i}: only linear layers can run on the VM kernel")
            size = layer.out_size
        if size != self.n_classes:
            raise ValueError(f"network produces {size} logits for {self.n_classes} classes")


# ── Inference ────────────────────────────────────────────────────────────────


class KernelRunner(Protocol):
    """Executes the integer GEMV of VM-backed layers."""

    def gemv(self, w_q: np.ndarray, x_q: np.ndarray, b_q: np.ndarray) -> np.ndarray: ...


class KernelFault(Exception):
    """Raised inside `forward` when a VM-backed layer crashes or times out."""

    def __init__(self, outcome: Outcome, reason: Optional[str] = None, steps: int = 0):
        super().__init__(f"{outcome.value}{f' ({reason})' if reason else ''}")
        self.outcome = outcome
        self.reason = reason
        self.steps = steps


def _linear(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    out = np.zeros((x.shape[0], w.shape[0]), dtype=x.dtype)
    for j in range(w.shape[1]):
        out += x[:, j : j + 1] * w[:, j]
    return out


def _conv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    f, c, k1, k2 = w.shape
    ho, wo = x.shape[2] - k1 + 1, x.shape[3] - k2 + 1
    out = np.zeros((x.shape[0], f, ho, wo), dtype=x.dtype)
    for ci in range(c):
        for r in range(k1):
            for s in range(k2):
                out += x[:, None, ci, r : r + ho, s : s + wo] * w[:, ci, r, s][None, :, None, None]
    return out


def relu(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, z, z.dtype.type(0))


def quantize_activations(h: np.ndarray, scale_in: float) -> np.ndarray:
    return np.clip(np.rint(h / np.float32(scale_in)), -INT8_MAX, INT8_MAX).astype(np.int32)


def gemv_oracle(w_q: np.ndarray, x_q: np.ndarray, b_q: np.ndarray) -> np.ndarray:
    """Reference integer GEMV with the kernel's saturation bounds."""
    acc = w_q.astype(np.int64) @ x_q.astype(np.int64) + b_q.astype(np.int64)
    return np.clip(acc, SAT_LO, SAT_HI)


def _integer_forward(layer: QuantLayer, h: np.ndarray, kernel: Optional[KernelRunner]) -> np.ndarray:
    x_q = quantize_activations(h, layer.scale_in)
    w_q = layer.weights.astype(np.int32)
    b_q = layer.bias.astype(np.int32)
    if kernel is None:
        acc = np.clip(x_q.astype(np.int64) @ w_q.T.astype(np.int64) + b_q.astype(np.int64), SAT_LO, SAT_HI)
    else:
        acc = np.stack([kernel.gemv(w_q, row, b_q) for row in x_q])
    return acc.astype(np.float32) * np.float32(layer.scale_w * layer.scale_in)


def _layer_forward(layer: QuantLayer, h: np.ndarray, kernel: Optional[KernelRunner]) -> np.ndarray:
    n = h.shape[0]
    if layer.backend == VM_KERNEL and layer.quantized:
        z = _integer_forward(layer, h, kernel)
    elif layer.kind == CONV2D:
        z = _conv(h.reshape((n,) + tuple(layer.in_shape)), layer.dequantized())
        z = (z + layer.bias_fp()[None, :, None, None]).reshape(n, -1)
    else:
        z = _linear(h, layer.dequantized()) + layer.bias_fp()
    return relu(z) if layer.activation == RELU else z


def forward(net: Network, x: np.ndarray, kernel: Optional[KernelRunner] = None) -> np.ndarray:
    """Logits for one sample (d,) or a batch (n, d)."""
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 1
    h = x.reshape(1 if single else x.shape[0], -1)
    if h.shape[1] != net.input_dim:
        raise ValueError(f"expected {net.input_dim} features, got {h.shape[1]}")
    for layer in net.layers:
        h = _layer_forward(layer, h, kernel)
    return h[0] if single else h


@dataclass(frozen=True, eq=False)
class EvalReport:
    accuracy: Optional[float]
    per_class: Tuple[float, ...]
    n_samples: int
    outcome: Outcome = Outcome.OK
    steps_executed: int = 0
    asr: Optional[float] = None
    reason: Optional[str] = None
    predictions: Optional[np.ndarray] = None


def predict(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to the lower class index
    return np.argmax(logits, axis=1)


def attack_success_rate(predictions: np.ndarray, labels: np.ndarray, source: int, target: int) -> float:
    mask = labels == source
    if not mask.any():
        return 0.0
    return float(np.mean(predictions[mask] == target))


def evaluate(
    net: Network,
    data: Union[Dataset, Batch],
    kernel: Optional[KernelRunner] = None,
    targeted: Optional[Tuple[int, int]] = None,
) -> EvalReport:
    batch = as_batch(data)
    if len(batch) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    steps_before = getattr(kernel, "steps", 0)
    try:
        logits = forward(net, batch.x, kernel)
    except KernelFault as fault:
        return EvalReport(
            accuracy=None,
            per_class=(),
            n_samples=len(batch),
            outcome=fault.outcome,
            steps_executed=getattr(kernel, "steps", 0) - steps_before,
            reason=fault.reason,
        )
    predictions = predict(logits)
    correct = predictions == batch.y
    per_class = tuple(
        float(np.mean(correct[batch.y == c])) if np.any(batch.y == c) else 0.0 for c in range(batch.n_classes)
    )
    asr = attack_success_rate(predictions, batch.y, *targeted) if targeted else None
    return EvalReport(
        accuracy=float(np.mean(correct)),
        per_class=per_class,
        n_samples=len(batch),
        steps_executed=getattr(kernel, "steps", 0) - steps_before,
        asr=asr,
        predictions=predictions,
    )


# ── Gradients ────────────────────────────────────────────────────────────────


@dataclass(frozen=True, eq=False)
class GradientMap:
    """∂L/∂W per layer, shape-congruent with the layer weights."""

    grads: Tuple[np.ndarray, ...]
    loss: float

    def __len__(self) -> int:
        return len(self.grads)


def _backprop(
    net: Network,
    batch: Batch,
    weights: Optional[Sequence[np.ndarray]] = None,
    need_grads: bool = True,
) -> Tuple[float, List[np.ndarray], List[np.ndarray]]:
    ws = [np.asarray(w, dtype=np.float64) for w in weights] if weights is not None else [
        layer.dequantized().astype(np.float64) for layer in net.layers
    ]
    bs = [layer.bias_fp().astype(np.float64) for layer in net.layers]
    n = len(batch)
    h = batch.x.astype(np.float64)
    cache = []
    for layer, w, b in zip(net.layers, ws, bs):
        if layer.kind == CONV2D:
            inp = h.reshape((n,) + tuple(layer.in_shape))
            z = _conv(inp, w) + b[None, :, None, None]
        else:
            inp = h
            z = inp @ w.T + b
        cache.append((inp, z))
        a = np.where(z > 0, z, 0.0) if layer.activation == RELU else z
        h = a.reshape(n, -1)

    shifted = h - h.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = float(-log_probs[rows, batch.y].mean())
    if not np.isfinite(loss):
        raise NonFiniteError(f"loss is {loss}")
    if not need_grads:
        return loss, [], []

    delta = np.exp(log_probs)
    delta[rows, batch.y] -= 1.0
    delta /= n
    grad_w: List[np.ndarray] = [np.empty(0)] * len(net.layers)
    grad_b: List[np.ndarray] = [np.empty(0)] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer, w = net.layers[i], ws[i]
        inp, z = cache[i]
        d = delta.reshape(z.shape)
        if layer.activation == RELU:
            d = d * (z > 0)
        if layer.kind == CONV2D:
            _, c, k1, k2 = w.shape
            ho, wo = z.shape[2], z.shape[3]
            gw = np.zeros_like(w)
            d_in = np.zeros_like(inp)
            for ci in range(c):
                for r in range(k1):
                    for s in range(k2):
                        window = inp[:, ci, r : r + ho, s : s + wo]
                        gw[:, ci, r, s] = np.einsum("nfyx,nyx->f", d, window)
                        d_in[:, ci, r : r + ho, s : s + wo] += np.einsum("nfyx,f->nyx", d, w[:, ci, r, s])
            grad_b[i] = d.sum(axis=(0, 2, 3))
        else:
            gw = d.T @ inp
            d_in = d @ w
            grad_b[i] = d.sum(axis=0)
        grad_w[i] = gw
        delta = d_in.reshape(n, -1)
    for g in grad_w:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("gradient contains NaN/Inf")
    return loss, grad_w, grad_b


def batch_loss(net: Network, data: Union[Dataset, Batch], weights: Optional[Sequence[np.ndarray]] = None) -> float:
    """Mean cross-entropy, computed in float64 on the dequantized weights."""
    loss, _, _ = _backprop(net, as_batch(data), weights, need_grads=False)
    return loss


def compute_gradients(net: Network, data: Union[Dataset, Batch]) -> GradientMap:
    batch = as_batch(data)
    if len(batch) == 0:
        raise ValueError("cannot compute gradients on an empty batch")
    loss, grad_w, _ = _backprop(net, batch)
    return GradientMap(tuple(g.astype(np.float32) for g in grad_w), loss)


# ── Training and quantization ────────────────────────────────────────────────


def parse_layer_spec(spec: Sequence[Union[int, str]]) -> Tuple[Tuple[int, ...], List[Tuple[str, int, int]]]:
    """Split `[input, layer, layer, ...]` into an input shape and layer entries.

    The input is an int (flat) or "CxHxW"; layers are ints (linear widths) or
    "conv:F:K" (F filters of size K×K, stride 1, no padding).
    """
    if len(spec) < 2:
        raise ValueError("layer spec needs an input size and at least one layer")
    head = spec[0]
    in_shape = tuple(int(p) for p in head.lower().split("x")) if isinstance(head, str) else (int(head),)
    entries: List[Tuple[str, int, int]] = []
    for item in spec[1:]:
        if isinstance(item, str) and item.startswith("conv:"):
            _, filters, k = item.split(":")
            entries.append((CONV2D, int(filters), int(k)))
        else:
            entries.append((LINEAR, int(item), 0))
    return in_shape, entries


def init_network(spec: Sequence[Union[int, str]], n_classes: int, seed: int) -> Network:
    in_shape, entries = parse_layer_spec(spec)
    rng = SplitMix64(derive_seed(seed, "init"))
    layers: List[QuantLayer] = []
    shape = in_shape
    for i, (kind, width, k) in enumerate(entries):
        last = i == len(entries) - 1
        if kind == CONV2D:
            if len(shape) != 3:
                raise ValueError("a conv layer needs a CxHxW input")
            fan_in = shape[0] * k * k
            wshape: Tuple[int, ...] = (width, shape[0], k, k)
        else:
            fan_in = int(np.prod(shape))
            wshape = (width, fan_in)
        std = np.sqrt(2.0 / fan_in)
        w = (np.array(rng.normals(int(np.prod(wshape))), dtype=np.float64) * std).reshape(wshape)
        layer = QuantLayer(
            kind=kind,
            weights=w.astype(np.float32),
            bias=np.zeros(width, dtype=np.float32),
            in_shape=tuple(shape) if kind == CONV2D else (int(np.prod(shape)),),
            activation=NONE if last else RELU,
            origin=i,
        )
        layers.append(layer)
        shape = layer.out_shape
    net = Network(tuple(layers), int(np.prod(in_shape)), n_classes)
    net.validate()
    return net


def _calibrate(net: Network, batch: Batch) -> Network:
    layers = []
    h = batch.x.astype(np.float32)
    for layer in net.layers:
        peak = float(np.max(np.abs(h))) if h.size else 1.0
        layers.append(replace(layer, act_max=peak if peak > 0 else 1.0))
        h = _layer_forward(layer, h, None)
    return net.with_layers(layers)


def train(
    spec: Sequence[Union[int, str]],
    ds: Dataset,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
) -> Network:
    """Plain mini-batch SGD on mean cross-entropy; fully determined by its arguments."""
    net = init_network(spec, ds.n_classes, seed)
    if net.input_dim != ds.dim:
        raise ValueError(f"spec expects {net.input_dim} features, dataset has {ds.dim}")
    shuffle_rng = SplitMix64(derive_seed(seed, "shuffle"))
    batch = ds.train
    for epoch in range(epochs):
        order = shuffle_rng.permutation(len(batch))
        total = 0.0
        for start in range(0, len(order), batch_size):
            mini = batch.take(order[start : start + batch_size])
            loss, grad_w, grad_b = _backprop(net, mini)
            total += loss * len(mini)
            layers = []
            for layer, gw, gb in zip(net.layers, grad_w, grad_b):
                layers.append(
                    replace(
                        layer,
                        weights=(layer.weights.astype(np.float64) - lr * gw).astype(np.float32),
                        bias=(layer.bias.astype(np.float64) - lr * gb).astype(np.float32),
                    )
                )
            net = net.with_layers(layers)
        logger.debug("epoch %d: train loss %.5f", epoch + 1, total / max(len(batch), 1))
    net = _calibrate(net, batch)
    accuracy = evaluate(net, ds).accuracy or 0.0
    logger.info("trained %s for %d epochs: eval accuracy %.4f", list(spec), epochs, accuracy)
    return replace(net, meta={**net.meta, "eval_accuracy": accuracy})


def quantize(net_fp: Network) -> Network:
    """Symmetric per-layer int8 quantization; biases become int32 at scale_w·scale_in."""
    scales_in = [layer.act_max / INT8_MAX for layer in net_fp.layers]
    layers = []
    for i, layer in enumerate(net_fp.layers):
        w = layer.weights.astype(np.float32)
        peak = float(np.max(np.abs(w))) if w.size else 0.0
        if peak == 0.0:
            raise DegenerateLayerError(f"layer {i} is all zero; its scale is undefined")
        scale_w = float(np.float32(peak / INT8_MAX))
        q = np.clip(np.rint(w / np.float32(scale_w)), -INT8_MAX, INT8_MAX).astype(np.int8)
        scale_in = float(np.float32(scales_in[i]))
        bias_q = np.clip(
            np.rint(layer.bias.astype(np.float64) / (scale_w * scale_in)), -(2**31), 2**31 - 1
        ).astype(np.int32)
        scale_out = float(np.float32(scales_in[i + 1])) if i + 1 < len(scales_in) else 1.0
        layers.append(
            replace(
                layer,
                weights=q,
                bias=bias_q,
                scale_w=scale_w,
                scale_in=scale_in,
                scale_out=scale_out,
                origin=layer.origin if layer.origin >= 0 else i,
                row_origin=layer.rows(),
                col_origin=layer.cols(),
            )
        )
    return net_fp.with_layers(layers)


def with_backend(net: Network, layer_indices: Sequence[int], backend: str = VM_KERNEL) -> Network:
    """Return a copy whose listed layers (negative indices allowed) use `backend`."""
    chosen = {i % len(net.layers) for i in layer_indices}
    return net.with_layers(
        [replace(layer, backend=backend) if i in chosen else layer for i, layer in enumerate(net.layers)]
    )


# ── Model file ───────────────────────────────────────────────────────────────

_KINDS = {LINEAR: 0, CONV2D: 1}
_ACTIVATIONS = {NONE: 0, RELU: 1}
_BACKENDS = {NATIVE: 0, VM_KERNEL: 1}


def _lookup(table: Dict[str, int], code: int) -> str:
    for name, value in table.items():
        if value == code:
            return name
    raise FormatError(f"unknown code {code}")


def _pack_units(units: Optional[Tuple[int, ...]]) -> bytes:
    if units is None:
        return struct.pack("<B", 0)
    return struct.pack(f"<BI{len(units)}i", 1, len(units), *units)


def _unpack_units(data: bytes, pos: int) -> Tuple[Optional[Tuple[int, ...]], int]:
    (present,) = struct.unpack_from("<B", data, pos)
    if not present:
        return None, pos + 1
    (n,) = struct.unpack_from("<I", data, pos + 1)
    units = struct.unpack_from(f"<{n}i", data, pos + 5)
    return tuple(int(u) for u in units), pos + 5 + 4 * n


def serialize_network(net: Network) -> bytes:
    quantized = net.quantized
    out = bytearray(MODEL_MAGIC)
    out += struct.pack("<HHIIB", MODEL_VERSION, len(net.layers), net.input_dim, net.n_classes, int(quantized))
    for layer in net.layers:
        out += struct.pack(
            "<BBBB", _KINDS[layer.kind], _ACTIVATIONS[layer.activation], _BACKENDS[layer.backend], layer.weights.ndim
        )
        out += struct.pack(f"<{layer.weights.ndim}I", *layer.weights.shape)
        out += struct.pack("<B", len(layer.in_shape)) + struct.pack(f"<{len(layer.in_shape)}I", *layer.in_shape)
        out += struct.pack("<ffff", layer.scale_w or 0.0, layer.scale_in, layer.scale_out, layer.act_max)
        out += struct.pack("<i", layer.origin)
        for units in (layer.row_origin, layer.col_origin):
            out += _pack_units(units)
    for layer in net.layers:
        if quantized:
            out += layer.weights.astype("<i1").tobytes() + layer.bias.astype("<i4").tobytes()
        else:
            out += layer.weights.astype("<f4").tobytes() + layer.bias.astype("<f4").tobytes()
    return bytes(out)


def deserialize_network(data: bytes) -> Network:
    if data[:4] != MODEL_MAGIC:
        raise FormatError("not a model file (bad magic)")
    version, n_layers, input_dim, n_classes, quantized = struct.unpack_from("<HHIIB", data, 4)
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}")
    pos = 4 + struct.calcsize("<HHIIB")
    headers = []
    for _ in range(n_layers):
        kind, act, backend, ndim = struct.unpack_from("<BBBB", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        (in_ndim,) = struct.unpack_from("<B", data, pos)
        in_shape = struct.unpack_from(f"<{in_ndim}I", data, pos + 1)
        pos += 1 + 4 * in_ndim
        scale_w, scale_in, scale_out, act_max = struct.unpack_from("<ffff", data, pos)
        pos += 16
        (origin,) = struct.unpack_from("<i", data, pos)
        rows, pos = _unpack_units(data, pos + 4)
        cols, pos = _unpack_units(data, pos)
        headers.append((kind, act, backend, shape, in_shape, scale_w, scale_in, scale_out, act_max, origin, rows, cols))
    layers = []
    for kind, act, backend, shape, in_shape, scale_w, scale_in, scale_out, act_max, origin, rows, cols in headers:
        count = int(np.prod(shape))
        wdtype, bdtype, wsize, bsize = ("<i1", "<i4", 1, 4) if quantized else ("<f4", "<f4", 4, 4)
        weights = np.frombuffer(data, dtype=wdtype, count=count, offset=pos).reshape(shape)
        pos += count * wsize
        bias = np.frombuffer(data, dtype=bdtype, count=shape[0], offset=pos)
        pos += shape[0] * bsize
        layers.append(
            QuantLayer(
                kind=_lookup(_KINDS, kind),
                weights=weights.astype(np.int8 if quantized else np.float32),
                bias=bias.astype(np.int32 if quantized else np.float32),
                in_shape=tuple(int(v) for v in in_shape),
                activation=_lookup(_ACTIVATIONS, act),
                backend=_lookup(_BACKENDS, backend),
                scale_w=float(scale_w) if quantized else None,
                scale_in=float(scale_in),
                scale_out=float(scale_out),
                act_max=float(act_max),
                origin=origin,
                row_origin=rows,
                col_origin=cols,
            )
        )
    if pos != len(data):
        raise FormatError("trailing bytes after model payload")
    net = Network(tuple(layers), input_dim, n_classes)
    net.validate()
    return net


def save_network(net: Network, path: Path) -> None:
    path.write_bytes(serialize_network(net))


def load_network(path: Path) -> Network:
    return deserialize_network(path.read_bytes())

