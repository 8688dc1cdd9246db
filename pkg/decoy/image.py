"""Byte-exact memory image (WEIGHTS + CODE) with bit-granular addressing.

The coordinate map that ties bytes back to weights travels beside the image (a
JSON sidecar on disk), never inside the payload: bit flips operate on raw
addresses only.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from decoy.engine import CONV2D, Network, QuantLayer
from decoy.errors import FormatError, OutOfRangeError, UnknownCoordinateError

if TYPE_CHECKING:
    from decoy.vm import Program

IMAGE_MAGIC = b"BARM"
IMAGE_VERSION = 1
PAGE_SIZE = 4096
WEIGHTS = "WEIGHTS"
CODE = "CODE"

_HEADER = struct.Struct("<4sHH")
_ENTRY = struct.Struct("<8sQQ")


@dataclass(frozen=True, order=True)
class BitAddress:
    """A single bit of the payload; bit 0 is the least significant bit."""

    byte_offset: int
    bit_index: int

    def __post_init__(self):
        if not 0 <= self.bit_index <= 7:
            raise ValueError(f"bit index {self.bit_index} outside 0..7")
        if self.byte_offset < 0:
            raise OutOfRangeError(f"negative byte offset {self.byte_offset}")

    def __str__(self) -> str:
        return f"{self.byte_offset}:{self.bit_index}"

    @classmethod
    def parse(cls, text: str) -> "BitAddress":
        byte, bit = text.split(":")
        return cls(int(byte), int(bit))


@dataclass(frozen=True)
class Section:
    name: str
    offset: int
    length: int

    @property
    def end(self) -> int:
        return self.offset + self.length

    def __contains__(self, byte_offset: int) -> bool:
        return self.offset <= byte_offset < self.end


@dataclass(frozen=True)
class WeightCoord:
    """A weight (or bias entry) of the image's current network, by layer and index."""

    layer: int
    index: Tuple[int, ...]
    bias: bool = False

    def __str__(self) -> str:
        where = "b" if self.bias else "w"
        return f"L{self.layer}{where}[{','.join(map(str, self.index))}]"


@dataclass(frozen=True)
class WeightLocation:
    coord: WeightCoord
    byte_offset: int
    bits: Tuple[BitAddress, ...]

    @property
    def msb(self) -> BitAddress:
        return self.bits[7]


@dataclass(frozen=True)
class LayerSlot:
    """Coordinate-map entry: where one layer's weights and biases sit in the payload."""

    kind: str
    weight_shape: Tuple[int, ...]
    in_shape: Tuple[int, ...]
    activation: str
    backend: str
    scale_w: float
    scale_in: float
    scale_out: float
    act_max: float
    origin: int
    row_origin: Tuple[int, ...]
    col_origin: Tuple[int, ...]
    weight_offset: int
    bias_offset: int

    @property
    def weight_bytes(self) -> int:
        return int(np.prod(self.weight_shape))

    @property
    def bias_bytes(self) -> int:
        return 4 * self.weight_shape[0]

    @property
    def dummy(self) -> bool:
        return self.origin < 0


@dataclass(frozen=True)
class CoordinateMap:
    slots: Tuple[LayerSlot, ...]
    input_dim: int
    n_classes: int
    code_entry: int = 0
    code_labels: Tuple[Tuple[str, int], ...] = ()

    def slot(self, layer: int) -> LayerSlot:
        if not 0 <= layer < len(self.slots):
            raise UnknownCoordinateError(f"no layer {layer}")
        return self.slots[layer]

    def layer_range(self, layer: int) -> Tuple[int, int]:
        slot = self.slot(layer)
        return slot.weight_offset, slot.weight_offset + slot.weight_bytes

    def inverse(self, byte_offset: int) -> Optional[WeightCoord]:
        """The weight or bias entry housed at `byte_offset`, or None outside the model."""
        for layer, slot in enumerate(self.slots):
            rel = byte_offset - slot.weight_offset
            if 0 <= rel < slot.weight_bytes:
                index = np.unravel_index(rel, slot.weight_shape)
                return WeightCoord(layer, tuple(int(i) for i in index))
            rel = byte_offset - slot.bias_offset
            if 0 <= rel < slot.bias_bytes:
                return WeightCoord(layer, (rel // 4,), bias=True)
        return None

    def original(self, coord: WeightCoord) -> Optional[Tuple[int, Tuple[int, ...], bool]]:
        """Translate a coordinate to (original layer, original index, bias); None for dummies."""
        slot = self.slot(coord.layer)
        if slot.dummy:
            return None
        row = slot.row_origin[coord.index[0]]
        if row < 0:
            return None
        if coord.bias:
            return slot.origin, (row,), True
        col = slot.col_origin[coord.index[1]]
        if col < 0:
            return None
        return slot.origin, (row, col) + tuple(coord.index[2:]), False

    def to_dict(self) -> Dict[str, object]:
        return {
            "input_dim": self.input_dim,
            "n_classes": self.n_classes,
            "code_entry": self.code_entry,
            "code_labels": [list(item) for item in self.code_labels],
            "slots": [
                {
                    "kind": s.kind,
                    "weight_shape": list(s.weight_shape),
                    "in_shape": list(s.in_shape),
                    "activation": s.activation,
                    "backend": s.backend,
                    "scale_w": s.scale_w,
                    "scale_in": s.scale_in,
                    "scale_out": s.scale_out,
                    "act_max": s.act_max,
                    "origin": s.origin,
                    "row_origin": list(s.row_origin),
                    "col_origin": list(s.col_origin),
                    "weight_offset": s.weight_offset,
                    "bias_offset": s.bias_offset,
                }
                for s in self.slots
            ],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "CoordinateMap":
        slots = tuple(
            LayerSlot(
                kind=s["kind"],
                weight_shape=tuple(s["weight_shape"]),
                in_shape=tuple(s["in_shape"]),
                activation=s["activation"],
                backend=s["backend"],
                scale_w=float(s["scale_w"]),
                scale_in=float(s["scale_in"]),
                scale_out=float(s["scale_out"]),
                act_max=float(s["act_max"]),
                origin=int(s["origin"]),
                row_origin=tuple(s["row_origin"]),
                col_origin=tuple(s["col_origin"]),
                weight_offset=int(s["weight_offset"]),
                bias_offset=int(s["bias_offset"]),
            )
            for s in data["slots"]  # type: ignore[union-attr]
        )
        return cls(
            slots=slots,
            input_dim=int(data["input_dim"]),  # type: ignore[arg-type]
            n_classes=int(data["n_classes"]),  # type: ignore[arg-type]
            code_entry=int(data.get("code_entry", 0)),  # type: ignore[arg-type]
            code_labels=tuple((str(n), int(o)) for n, o in data.get("code_labels", [])),  # type: ignore[union-attr]
        )


@dataclass(frozen=True, eq=False)
class MemoryImage:
    payload: bytes
    sections: Tuple[Section, ...]
    layout: CoordinateMap = field(compare=False)
    version: int = IMAGE_VERSION
    page_size: int = PAGE_SIZE

    def section(self, name: str) -> Section:
        for section in self.sections:
            if section.name == name:
                return section
        raise FormatError(f"image has no {name} section")

    def section_bytes(self, name: str) -> bytes:
        section = self.section(name)
        return self.payload[section.offset : section.end]

    def digest(self) -> str:
        return hashlib.sha256(self.payload).hexdigest()

    def section_digest(self, name: str) -> str:
        return hashlib.sha256(self.section_bytes(name)).hexdigest()

    @property
    def size(self) -> int:
        return len(self.payload)

    def with_payload(self, payload: bytes) -> "MemoryImage":
        return MemoryImage(payload, self.sections, self.layout, self.version, self.page_size)

    def network(self) -> Network:
        """Rebuild the (possibly bit-flipped) network stored in the WEIGHTS section."""
        layers = []
        for slot in self.layout.slots:
            weights = np.frombuffer(self.payload, dtype=np.int8, count=slot.weight_bytes, offset=slot.weight_offset)
            bias = np.frombuffer(self.payload, dtype="<i4", count=slot.weight_shape[0], offset=slot.bias_offset)
            layers.append(
                QuantLayer(
                    kind=slot.kind,
                    weights=weights.reshape(slot.weight_shape).copy(),
                    bias=bias.astype(np.int32),
                    in_shape=slot.in_shape,
                    activation=slot.activation,
                    backend=slot.backend,
                    scale_w=slot.scale_w,
                    scale_in=slot.scale_in,
                    scale_out=slot.scale_out,
                    act_max=slot.act_max,
                    origin=slot.origin,
                    row_origin=slot.row_origin,
                    col_origin=slot.col_origin,
                )
            )
        return Network(tuple(layers), self.layout.input_dim, self.layout.n_classes)


def _slot_for(layer: QuantLayer, weight_offset: int, bias_offset: int) -> LayerSlot:
    return LayerSlot(
        kind=layer.kind,
        weight_shape=tuple(int(d) for d in layer.weights.shape),
        in_shape=tuple(int(d) for d in layer.in_shape),
        activation=layer.activation,
        backend=layer.backend,
        scale_w=float(layer.scale_w),  # type: ignore[arg-type]
        scale_in=float(layer.scale_in),
        scale_out=float(layer.scale_out),
        act_max=float(layer.act_max),
        origin=layer.origin,
        row_origin=tuple(int(r) for r in layer.rows()),
        col_origin=tuple(int(c) for c in layer.cols()),
        weight_offset=weight_offset,
        bias_offset=bias_offset,
    )


def build_image(net: Network, prog: Optional["Program"] = None) -> MemoryImage:
    """Lay the quantized weights out row-major, layer by layer, then the biases, then the code."""
    if not net.quantized:
        raise ValueError("build_image needs a quantized network")
    net.validate()
    weight_blob = b"".join(layer.weights.astype(np.int8).tobytes() for layer in net.layers)
    bias_blob = b"".join(layer.bias.astype("<i4").tobytes() for layer in net.layers)
    slots = []
    w_pos, b_pos = 0, len(weight_blob)
    for layer in net.layers:
        slots.append(_slot_for(layer, w_pos, b_pos))
        w_pos += layer.weights.size
        b_pos += 4 * layer.out_units
    code = bytes(prog.bytecode) if prog is not None else b""
    weights_len = len(weight_blob) + len(bias_blob)
    sections = (Section(WEIGHTS, 0, weights_len), Section(CODE, weights_len, len(code)))
    layout = CoordinateMap(
        slots=tuple(slots),
        input_dim=net.input_dim,
        n_classes=net.n_classes,
        code_entry=prog.entry if prog is not None else 0,
        code_labels=tuple(sorted(prog.labels.items())) if prog is not None else (),
    )
    return MemoryImage(weight_blob + bias_blob + code, sections, layout)


def _check(img: MemoryImage, address: BitAddress) -> None:
    if address.byte_offset >= len(img.payload):
        raise OutOfRangeError(f"address {address} beyond payload of {len(img.payload)} bytes")


def flip_bit(img: MemoryImage, a: BitAddress) -> MemoryImage:
    _check(img, a)
    payload = bytearray(img.payload)
    payload[a.byte_offset] ^= 1 << a.bit_index
    return img.with_payload(bytes(payload))


def flip_bits(img: MemoryImage, addresses: Iterable[BitAddress]) -> MemoryImage:
    payload = bytearray(img.payload)
    for a in addresses:
        _check(img, a)
        payload[a.byte_offset] ^= 1 << a.bit_index
    return img.with_payload(bytes(payload))


def byte_bits(byte_offset: int) -> Tuple[BitAddress, ...]:
    return tuple(BitAddress(byte_offset, bit) for bit in range(8))


def locate_weight(img: MemoryImage, layer: int, coord: Sequence[int]) -> WeightLocation:
    slot = img.layout.slot(layer)
    coord = tuple(int(c) for c in coord)
    if len(coord) != len(slot.weight_shape) or any(not 0 <= c < d for c, d in zip(coord, slot.weight_shape)):
        raise UnknownCoordinateError(f"layer {layer} has no weight at {coord}")
    offset = slot.weight_offset + int(np.ravel_multi_index(coord, slot.weight_shape))
    return WeightLocation(WeightCoord(layer, coord), offset, byte_bits(offset))


def weight_byte_count(img: MemoryImage) -> int:
    return sum(slot.weight_bytes for slot in img.layout.slots)


# ── Files ────────────────────────────────────────────────────────────────────


def serialize_image(img: MemoryImage) -> bytes:
    out = bytearray(_HEADER.pack(IMAGE_MAGIC, img.version, len(img.sections)))
    for section in img.sections:
        out += _ENTRY.pack(section.name.encode().ljust(8, b"\0"), section.offset, section.length)
    return bytes(out) + img.payload


def deserialize_image(data: bytes, layout: CoordinateMap) -> MemoryImage:
    if len(data) < _HEADER.size:
        raise FormatError("not an image file (truncated header)")
    magic, version, count = _HEADER.unpack_from(data, 0)
    if magic != IMAGE_MAGIC:
        raise FormatError("not an image file (bad magic)")
    if version != IMAGE_VERSION:
        raise FormatError(f"unsupported image version {version}")
    sections: List[Section] = []
    pos = _HEADER.size
    for _ in range(count):
        if pos + _ENTRY.size > len(data):
            raise FormatError("truncated section table")
        name, offset, length = _ENTRY.unpack_from(data, pos)
        sections.append(Section(name.rstrip(b"\0").decode(), offset, length))
        pos += _ENTRY.size
    payload = data[pos:]
    for section in sections:
        if section.end > len(payload):
            raise FormatError(f"section {section.name} runs past the payload")
    return MemoryImage(bytes(payload), tuple(sections), layout, version)


def sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".map.json")


def save_image(img: MemoryImage, path: Path) -> None:
    path.write_bytes(serialize_image(img))
    sidecar_path(path).write_text(json.dumps(img.layout.to_dict(), indent=1))


def load_image(path: Path) -> MemoryImage:
    sidecar = sidecar_path(path)
    if not sidecar.exists():
        raise FormatError(f"{path}: missing coordinate map {sidecar.name}")
    layout = CoordinateMap.from_dict(json.loads(sidecar.read_text()))
    return deserialize_image(path.read_bytes(), layout)
