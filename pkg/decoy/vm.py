"""Register VM with x86-style jump encodings, its assembler and the NOP rewriter.

Sixteen 32-bit registers (r0..r15), a word-addressed int32 data memory and one
comparison flag. Every fault (bad opcode, bad address, runaway loop) is folded
into a `VmOutcome`; nothing the bytecode does can raise in the host.
"""

import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Dict, FrozenSet, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from decoy.engine import SAT_HI, SAT_LO, Dataset, EvalReport, KernelFault, Network, Outcome, evaluate
from decoy.errors import (
    AssemblyParseError,
    AssemblyRangeError,
    FormatError,
    NotConditionalError,
    NotInstructionBoundaryError,
)
from decoy.image import CODE, MemoryImage

logger = logging.getLogger(__name__)

DEFAULT_STEP_BUDGET = 1_000_000
NOP_BYTE = 0x90

# gemv header words
GEMV_HEADER = 8

_OPERAND_BYTES = {"": 0, "r,imm32": 5, "r,r": 1, "r,[r+disp32]": 5, "[r+disp32],r": 5, "rel8": 1, "rel32": 4}


@dataclass(frozen=True)
class Opcode:
    encoding: bytes
    mnemonic: str
    operands: str = ""

    @property
    def conditional(self) -> bool:
        return self.mnemonic in _CONDITIONS

    @property
    def near(self) -> bool:
        return self.operands == "rel32"

    @property
    def length(self) -> int:
        return len(self.encoding) + _OPERAND_BYTES[self.operands]

    def __str__(self) -> str:
        return f"{self.mnemonic.upper()} (0x{self.encoding.hex().upper()})"


_CONDITIONS = {"je": 0, "jne": 1, "jl": 2, "jge": 3, "jle": 4, "jg": 5}
_SHORT_JCC = {"je": 0x74, "jne": 0x75, "jl": 0x7C, "jge": 0x7D, "jle": 0x7E, "jg": 0x7F}

OPCODES: Dict[bytes, Opcode] = {}


def _register(opcode: Opcode) -> None:
    OPCODES[opcode.encoding] = opcode


for _op in (
    Opcode(b"\x90", "nop"),
    Opcode(b"\xf4", "halt"),
    Opcode(b"\xb8", "loadi", "r,imm32"),
    Opcode(b"\x8a", "mov", "r,r"),
    Opcode(b"\x8b", "load", "r,[r+disp32]"),
    Opcode(b"\x89", "store", "[r+disp32],r"),
    Opcode(b"\x01", "add", "r,r"),
    Opcode(b"\x29", "sub", "r,r"),
    Opcode(b"\xaf", "mul", "r,r"),
    Opcode(b"\x39", "cmp", "r,r"),
    Opcode(b"\xeb", "jmp", "rel8"),
    Opcode(b"\xe9", "jmp", "rel32"),
):
    _register(_op)
for _name, _byte in _SHORT_JCC.items():
    _register(Opcode(bytes([_byte]), _name, "rel8"))
    _register(Opcode(bytes([0x0F, _byte + 0x10]), _name, "rel32"))

_BY_NAME: Dict[Tuple[str, bool], Opcode] = {(op.mnemonic, op.near): op for op in OPCODES.values()}


def opposite_jump(op: Union[Opcode, int, bytes]) -> Opcode:
    """The semantic opposite of a conditional jump: bit 0 of the final opcode byte flipped.

    Accepts an `Opcode`, its encoding, or the encoding as an integer (0x74, 0x0F84).
    """
    if isinstance(op, int):
        op = op.to_bytes(2 if op > 0xFF else 1, "big")
    if isinstance(op, (bytes, bytearray)):
        found = OPCODES.get(bytes(op))
        if found is None:
            raise NotConditionalError(f"0x{bytes(op).hex()} is not an opcode")
        op = found
    if not op.conditional:
        raise NotConditionalError(f"{op} is not a conditional jump")
    flipped = op.encoding[:-1] + bytes([op.encoding[-1] ^ 0x01])
    return OPCODES[flipped]


@dataclass(frozen=True)
class Instruction:
    offset: int
    opcode: Opcode
    regs: Tuple[int, ...] = ()
    imm: int = 0
    target: Optional[int] = None

    @property
    def length(self) -> int:
        return self.opcode.length

    @property
    def end(self) -> int:
        return self.offset + self.length

    @property
    def conditional(self) -> bool:
        return self.opcode.conditional

    @property
    def opcode_byte(self) -> int:
        """Offset of the final opcode byte, the one whose bit 0 selects the jump sense."""
        return self.offset + len(self.opcode.encoding) - 1

    def text(self) -> str:
        name = self.opcode.mnemonic.upper()
        layout = self.opcode.operands
        if layout == "r,imm32":
            return f"{name} r{self.regs[0]}, {self.imm}"
        if layout == "r,r":
            return f"{name} r{self.regs[0]}, r{self.regs[1]}"
        if layout == "r,[r+disp32]":
            return f"{name} r{self.regs[0]}, [r{self.regs[1]}{self.imm:+d}]"
        if layout == "[r+disp32],r":
            return f"{name} [r{self.regs[0]}{self.imm:+d}], r{self.regs[1]}"
        if layout.startswith("rel"):
            return f"{name}{'.n' if self.opcode.near else ''} {self.target}"
        return name


class InvalidInstruction(Exception):
    """Bytes at an offset do not decode (unassigned opcode, bad register, truncation)."""


def _signed(raw: bytes) -> int:
    return int.from_bytes(raw, "little", signed=True)


def decode(code: bytes, pc: int) -> Instruction:
    if not 0 <= pc < len(code):
        raise InvalidInstruction(f"offset {pc} outside code")
    key = bytes(code[pc : pc + 2]) if code[pc] == 0x0F else bytes([code[pc]])
    op = OPCODES.get(key)
    if op is None or pc + op.length > len(code):
        raise InvalidInstruction(f"invalid opcode 0x{key.hex()} at {pc}")
    body = code[pc + len(op.encoding) : pc + op.length]
    layout = op.operands
    if layout == "r,imm32":
        if body[0] > 15:
            raise InvalidInstruction(f"bad register at {pc}")
        return Instruction(pc, op, (body[0],), _signed(body[1:5]))
    if layout == "r,r":
        return Instruction(pc, op, (body[0] >> 4, body[0] & 0x0F))
    if layout in ("r,[r+disp32]", "[r+disp32],r"):
        return Instruction(pc, op, (body[0] >> 4, body[0] & 0x0F), _signed(body[1:5]))
    if layout.startswith("rel"):
        return Instruction(pc, op, target=pc + op.length + _signed(body))
    return Instruction(pc, op)


def linear_decode(code: bytes) -> List[Instruction]:
    """Straight-line decode of a whole code section."""
    out: List[Instruction] = []
    pc = 0
    while pc < len(code):
        try:
            ins = decode(code, pc)
        except InvalidInstruction as exc:
            raise FormatError(str(exc)) from None
        out.append(ins)
        pc = ins.end
    return out


@dataclass(frozen=True, eq=False)
class Program:
    bytecode: bytes
    labels: Mapping[str, int] = field(default_factory=dict)
    entry: int = 0
    _decoded: Dict[int, tuple] = field(default_factory=dict, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.bytecode)

    def instructions(self) -> List[Instruction]:
        return linear_decode(self.bytecode)

    def conditional_jumps(self) -> List[Instruction]:
        return [ins for ins in self.instructions() if ins.conditional]

    def label_at(self, offset: int) -> Optional[str]:
        for name, where in sorted(self.labels.items()):
            if where == offset:
                return name
        return None

    def disassemble(self) -> str:
        lines = []
        for ins in self.instructions():
            label = self.label_at(ins.offset)
            if label:
                lines.append(f"{label}:")
            lines.append(f"  {ins.offset:5d}  {ins.text()}")
        return "\n".join(lines)


# ── Assembler ────────────────────────────────────────────────────────────────

_AUTO, _SHORT, _NEAR = "auto", "short", "near"
_JUMPS = {"jmp"} | set(_CONDITIONS)
_LABEL = re.compile(r"^([A-Za-z_][\w.]*)\s*:\s*(.*)$")
_REG = re.compile(r"^r(\d+)$", re.IGNORECASE)
_MEM = re.compile(r"^\[\s*r(\d+)\s*(?:([+-])\s*(0x[0-9a-f]+|\d+))?\s*\]$", re.IGNORECASE)


@dataclass
class _Item:
    """One instruction awaiting layout; jump targets are item indices."""

    mnemonic: str
    regs: Tuple[int, ...] = ()
    imm: int = 0
    target: Optional[int] = None
    form: str = _AUTO
    line: int = 0

    @property
    def jump(self) -> bool:
        return self.mnemonic in _JUMPS


def _item_size(item: _Item, near: bool) -> int:
    if item.jump:
        return _BY_NAME[(item.mnemonic, near)].length
    return _BY_NAME[(item.mnemonic, False)].length


def _fits8(value: int) -> bool:
    return -128 <= value <= 127


def _layout(items: Sequence[_Item]) -> Tuple[List[int], List[bool]]:
    """Choose short/near forms (short first, promote when out of range) and compute offsets."""
    near = [item.jump and item.form == _NEAR for item in items]
    while True:
        offsets = [0]
        for item, is_near in zip(items, near):
            offsets.append(offsets[-1] + _item_size(item, is_near))
        changed = False
        for i, item in enumerate(items):
            if not item.jump or near[i]:
                continue
            disp = offsets[item.target] - offsets[i + 1]  # type: ignore[index]
            if _fits8(disp):
                continue
            if item.form == _SHORT:
                raise AssemblyRangeError(f"line {item.line}: short {item.mnemonic} cannot reach displacement {disp}")
            near[i] = True
            changed = True
        if not changed:
            return offsets, near


def _encode(items: Sequence[_Item], offsets: Sequence[int], near: Sequence[bool]) -> bytes:
    out = bytearray()
    for i, item in enumerate(items):
        op = _BY_NAME[(item.mnemonic, near[i] if item.jump else False)]
        out += op.encoding
        layout = op.operands
        if layout == "r,imm32":
            out.append(item.regs[0])
            out += (item.imm & 0xFFFFFFFF).to_bytes(4, "little")
        elif layout == "r,r":
            out.append(item.regs[0] << 4 | item.regs[1])
        elif layout in ("r,[r+disp32]", "[r+disp32],r"):
            out.append(item.regs[0] << 4 | item.regs[1])
            out += (item.imm & 0xFFFFFFFF).to_bytes(4, "little")
        elif layout.startswith("rel"):
            disp = offsets[item.target] - offsets[i + 1]  # type: ignore[index]
            out += disp.to_bytes(4 if op.near else 1, "little", signed=True)
    return bytes(out)


def _register_operand(text: str, line: int) -> int:
    match = _REG.match(text.strip())
    if not match or int(match.group(1)) > 15:
        raise AssemblyParseError(line, f"expected a register r0..r15, got '{text.strip()}'")
    return int(match.group(1))


def _memory_operand(text: str, line: int) -> Tuple[int, int]:
    match = _MEM.match(text.strip())
    if not match or int(match.group(1)) > 15:
        raise AssemblyParseError(line, f"expected [rN+disp], got '{text.strip()}'")
    disp = int(match.group(3), 0) if match.group(3) else 0
    return int(match.group(1)), -disp if match.group(2) == "-" else disp


def _immediate(text: str, line: int) -> int:
    try:
        value = int(text.strip(), 0)
    except ValueError:
        raise AssemblyParseError(line, f"bad immediate '{text.strip()}'") from None
    if not -(1 << 31) <= value < (1 << 32):
        raise AssemblyParseError(line, f"immediate {value} does not fit 32 bits")
    return value


def _parse(source: str) -> Tuple[List[_Item], Dict[str, int], List[Tuple[int, str]]]:
    items: List[_Item] = []
    labels: Dict[str, int] = {}
    pending: List[Tuple[int, str]] = []  # (item index, label) for jump targets
    for lineno, raw in enumerate(source.splitlines(), 1):
        text = raw.split(";", 1)[0].strip()
        while True:
            match = _LABEL.match(text)
            if not match:
                break
            name = match.group(1)
            if name in labels:
                raise AssemblyParseError(lineno, f"duplicate label '{name}'")
            labels[name] = len(items)
            text = match.group(2).strip()
        if not text:
            continue
        head, _, rest = text.replace("\t", " ").partition(" ")
        mnemonic, _, suffix = head.lower().partition(".")
        operands = [part for part in (p.strip() for p in rest.split(",")) if part] if rest.strip() else []
        if mnemonic in _JUMPS:
            form = {"": _AUTO, "s": _SHORT, "n": _NEAR}.get(suffix)
            if form is None:
                raise AssemblyParseError(lineno, f"unknown jump suffix '.{suffix}'")
            if len(operands) != 1:
                raise AssemblyParseError(lineno, f"{mnemonic.upper()} takes one label")
            pending.append((len(items), operands[0]))
            items.append(_Item(mnemonic, form=form, line=lineno))
            continue
        if suffix:
            raise AssemblyParseError(lineno, f"suffix '.{suffix}' only applies to jumps")
        if (mnemonic, False) not in _BY_NAME:
            raise AssemblyParseError(lineno, f"unknown mnemonic '{head}'")
        layout = _BY_NAME[(mnemonic, False)].operands
        expected = 0 if layout == "" else 2
        if len(operands) != expected:
            raise AssemblyParseError(lineno, f"{mnemonic.upper()} takes {expected} operands")
        if layout == "r,imm32":
            item = _Item(mnemonic, (_register_operand(operands[0], lineno),), _immediate(operands[1], lineno))
        elif layout == "r,r":
            item = _Item(mnemonic, (_register_operand(operands[0], lineno), _register_operand(operands[1], lineno)))
        elif layout == "r,[r+disp32]":
            base, disp = _memory_operand(operands[1], lineno)
            item = _Item(mnemonic, (_register_operand(operands[0], lineno), base), disp)
        elif layout == "[r+disp32],r":
            base, disp = _memory_operand(operands[0], lineno)
            item = _Item(mnemonic, (base, _register_operand(operands[1], lineno)), disp)
        else:
            item = _Item(mnemonic)
        item.line = lineno
        items.append(item)
    return items, labels, pending


def assemble(source: str) -> Program:
    """Assemble source text; labels become rel8 displacements when in range, rel32 otherwise.

    The entry point is the `start` label when defined, else offset 0.
    """
    items, label_index, pending = _parse(source)
    for index, name in pending:
        if name not in label_index:
            raise AssemblyParseError(items[index].line, f"undefined label '{name}'")
        items[index].target = label_index[name]
    offsets, near = _layout(items)
    labels = {name: offsets[index] for name, index in label_index.items()}
    prog = Program(_encode(items, offsets, near), labels, labels.get("start", 0))
    logger.debug("assembled %d instructions into %d bytes", len(items), len(prog.bytecode))
    return prog


def load_kernel(name: str = "gemv") -> Program:
    """Assemble one of the kernels shipped in `decoy/kernels`."""
    source = resources.files("decoy.kernels").joinpath(f"{name}.asm").read_text()
    return assemble(source)


# ── NOP insertion ────────────────────────────────────────────────────────────


class Rewrite(NamedTuple):
    program: Program
    offsets: Dict[int, int]  # old instruction offset -> new offset of the same instruction


def _items_from(prog: Program) -> Tuple[List[_Item], Dict[int, int], List[Instruction]]:
    decoded = prog.instructions()
    index_of = {ins.offset: i for i, ins in enumerate(decoded)}
    index_of[len(prog.bytecode)] = len(decoded)
    items = []
    for ins in decoded:
        if ins.opcode.operands.startswith("rel"):
            if ins.target not in index_of:
                raise NotInstructionBoundaryError(f"jump at {ins.offset} targets mid-instruction offset {ins.target}")
            form = _NEAR if ins.opcode.near else _AUTO
            items.append(_Item(ins.opcode.mnemonic, target=index_of[ins.target], form=form))
        else:
            items.append(_Item(ins.opcode.mnemonic, ins.regs, ins.imm))
    return items, index_of, decoded


def insert_nops_many(prog: Program, insertions: Mapping[int, int]) -> Rewrite:
    """Insert NOP runs before several instructions in one re-layout.

    `insertions` maps an original instruction offset to a NOP count. Jumps, labels
    and the entry point that named an instruction now land on the start of its NOP
    run; short jumps pushed out of rel8 range are promoted to rel32.
    """
    items, index_of, decoded = _items_from(prog)
    for offset, count in insertions.items():
        if offset not in index_of or offset == len(prog.bytecode):
            raise NotInstructionBoundaryError(f"offset {offset} does not start an instruction")
        if count < 0:
            raise ValueError(f"negative NOP count {count} at {offset}")
    new_items: List[_Item] = []
    run_start: List[int] = []
    own_index: List[int] = []
    for ins, item in zip(decoded, items):
        run_start.append(len(new_items))
        new_items.extend(_Item("nop") for _ in range(insertions.get(ins.offset, 0)))
        own_index.append(len(new_items))
        new_items.append(item)
    run_start.append(len(new_items))
    for item in new_items:
        if item.target is not None:
            item.target = run_start[item.target]
    offsets, near = _layout(new_items)
    relocated = {ins.offset: offsets[own_index[i]] for i, ins in enumerate(decoded)}
    relocated[len(prog.bytecode)] = offsets[-1]
    labels = {name: offsets[run_start[index_of[where]]] for name, where in prog.labels.items() if where in index_of}
    entry = offsets[run_start[index_of[prog.entry]]] if prog.entry in index_of else prog.entry
    return Rewrite(Program(_encode(new_items, offsets, near), labels, entry), relocated)


# ── Execution ────────────────────────────────────────────────────────────────


class CrashReason(str, Enum):
    INVALID_OPCODE = "InvalidOpcode"
    OUT_OF_BOUNDS_MEMORY = "OutOfBoundsMemory"
    BAD_JUMP_TARGET = "BadJumpTarget"


@dataclass(frozen=True, eq=False)
class VmOutcome:
    status: Outcome
    steps: int
    reason: Optional[CrashReason] = None
    memory: Optional[np.ndarray] = None
    trace: Optional[FrozenSet[int]] = None

    @property
    def ok(self) -> bool:
        return self.status is Outcome.OK


_K_NOP, _K_HALT, _K_LOADI, _K_MOV, _K_LOAD, _K_STORE, _K_ADD, _K_SUB, _K_MUL, _K_CMP, _K_JMP, _K_JCC = range(12)
_KIND = {
    "nop": _K_NOP,
    "halt": _K_HALT,
    "loadi": _K_LOADI,
    "mov": _K_MOV,
    "load": _K_LOAD,
    "store": _K_STORE,
    "add": _K_ADD,
    "sub": _K_SUB,
    "mul": _K_MUL,
    "cmp": _K_CMP,
    "jmp": _K_JMP,
}


def _compile(ins: Instruction) -> tuple:
    name = ins.opcode.mnemonic
    if name in _CONDITIONS:
        return _K_JCC, _CONDITIONS[name], ins.target, 0, ins.end
    kind = _KIND[name]
    regs = ins.regs + (0, 0)
    if kind == _K_JMP:
        return kind, 0, ins.target, 0, ins.end
    return kind, regs[0], regs[1], ins.imm, ins.end


def _wrap(value: int) -> int:
    return ((value + 0x80000000) & 0xFFFFFFFF) - 0x80000000


def execute(
    prog: Program, data_mem: Sequence[int], step_budget: int = DEFAULT_STEP_BUDGET, trace: bool = False
) -> VmOutcome:
    """Run `prog` from its entry point against a copy of `data_mem`.

    A HALT that lands exactly on the budget still reports Timeout, so `Timeout`
    holds iff `steps == step_budget`.
    """
    if step_budget <= 0:
        raise ValueError("step_budget must be positive")
    code = prog.bytecode
    cache = prog._decoded
    n_code = len(code)
    mem = [int(v) for v in data_mem]
    n_mem = len(mem)
    regs = [0] * 16
    flag = 0
    pc = prog.entry
    steps = 0
    seen: Optional[set] = set() if trace else None

    def crash(reason: CrashReason) -> VmOutcome:
        return VmOutcome(Outcome.CRASH, steps, reason, trace=frozenset(seen) if seen is not None else None)

    while steps < step_budget:
        ins = cache.get(pc)
        if ins is None:
            if not 0 <= pc < n_code:
                return crash(CrashReason.BAD_JUMP_TARGET)
            try:
                ins = _compile(decode(code, pc))
            except InvalidInstruction:
                return crash(CrashReason.INVALID_OPCODE)
            cache[pc] = ins
        if seen is not None:
            seen.add(pc)
        kind, a, b, c, nxt = ins
        if kind == _K_LOAD:
            addr = regs[b] + c
            if not 0 <= addr < n_mem:
                return crash(CrashReason.OUT_OF_BOUNDS_MEMORY)
            regs[a] = mem[addr]
        elif kind == _K_MOV:
            regs[a] = regs[b]
        elif kind == _K_ADD:
            regs[a] = _wrap(regs[a] + regs[b])
        elif kind == _K_MUL:
            regs[a] = _wrap(regs[a] * regs[b])
        elif kind == _K_CMP:
            diff = regs[a] - regs[b]
            flag = (diff > 0) - (diff < 0)
        elif kind == _K_JCC:
            if (
                (a == 0 and flag == 0)
                or (a == 1 and flag != 0)
                or (a == 2 and flag < 0)
                or (a == 3 and flag >= 0)
                or (a == 4 and flag <= 0)
                or (a == 5 and flag > 0)
            ):
                if not 0 <= b < n_code:
                    return crash(CrashReason.BAD_JUMP_TARGET)
                nxt = b
        elif kind == _K_JMP:
            if not 0 <= b < n_code:
                return crash(CrashReason.BAD_JUMP_TARGET)
            nxt = b
        elif kind == _K_LOADI:
            regs[a] = c
        elif kind == _K_STORE:
            addr = regs[a] + c
            if not 0 <= addr < n_mem:
                return crash(CrashReason.OUT_OF_BOUNDS_MEMORY)
            mem[addr] = regs[b]
        elif kind == _K_SUB:
            regs[a] = _wrap(regs[a] - regs[b])
        elif kind == _K_HALT:
            steps += 1
            if steps == step_budget:
                break
            memory = np.asarray(mem, dtype=np.int64)
            return VmOutcome(Outcome.OK, steps, memory=memory, trace=frozenset(seen) if seen is not None else None)
        steps += 1
        pc = nxt
    return VmOutcome(Outcome.TIMEOUT, step_budget, trace=frozenset(seen) if seen is not None else None)


# ── GEMV kernel runner ───────────────────────────────────────────────────────


def pack_gemv(w_q: np.ndarray, x_q: np.ndarray, b_q: Optional[np.ndarray]) -> Tuple[List[int], int]:
    """Lay out the kernel's data memory; returns it with the base of the output vector."""
    m, k = w_q.shape
    w_base = GEMV_HEADER
    x_base = w_base + m * k
    b_base = x_base + k
    out_base = b_base + m
    header = [m, k, w_base, x_base, b_base if b_q is not None else 0, out_base, SAT_HI, SAT_LO]
    bias = b_q.tolist() if b_q is not None else [0] * m
    mem = header + w_q.astype(np.int64).ravel().tolist() + x_q.astype(np.int64).tolist() + bias + [0] * m
    return [int(v) for v in mem], out_base


class VmKernel:
    """`KernelRunner` that computes each integer GEMV by executing a program on the VM."""

    def __init__(self, prog: Program, step_budget: int = DEFAULT_STEP_BUDGET, trace: bool = False):
        self.program = prog
        self.step_budget = step_budget
        self.steps = 0
        self.calls = 0
        self.coverage: Optional[set] = set() if trace else None

    def gemv(self, w_q: np.ndarray, x_q: np.ndarray, b_q: np.ndarray) -> np.ndarray:
        mem, out_base = pack_gemv(w_q, x_q, b_q)
        outcome = execute(self.program, mem, self.step_budget, trace=self.coverage is not None)
        self.steps += outcome.steps
        self.calls += 1
        if self.coverage is not None and outcome.trace:
            self.coverage |= outcome.trace
        if not outcome.ok:
            raise KernelFault(outcome.status, outcome.reason.value if outcome.reason else None, outcome.steps)
        return outcome.memory[out_base : out_base + w_q.shape[0]]  # type: ignore[index]


def program_from_image(img: MemoryImage) -> Program:
    layout = img.layout
    return Program(img.section_bytes(CODE), dict(layout.code_labels), layout.code_entry)


def run_inference_with_vm(
    img: MemoryImage,
    ds: Dataset,
    step_budget: int = DEFAULT_STEP_BUDGET,
    net: Optional[Network] = None,
    targeted: Optional[Tuple[int, int]] = None,
) -> EvalReport:
    """Evaluate the image's network with every VM-backed layer executed by the CODE section."""
    net = net if net is not None else img.network()
    kernel = VmKernel(program_from_image(img), step_budget)
    return evaluate(net, ds, kernel, targeted=targeted)
