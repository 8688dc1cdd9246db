"""Tests for the bytecode VM, its assembler and the NOP rewriter."""

import numpy as np
import pytest

from decoy.engine import Outcome, gemv_oracle
from decoy.errors import AssemblyParseError, AssemblyRangeError, NotConditionalError, NotInstructionBoundaryError
from decoy.vm import (
    OPCODES,
    CrashReason,
    Program,
    assemble,
    execute,
    insert_nops_many,
    linear_decode,
    opposite_jump,
    pack_gemv,
)

COUNTDOWN = """
start:
    LOADI r1, 5
    LOADI r2, 1
    LOADI r0, 0
loop:
    SUB r1, r2
    CMP r1, r0
    JG loop
    STORE [r0+0], r1
    HALT
"""


def _gemv(prog, w, x, b):
    mem, out = pack_gemv(w, x, b)
    result = execute(prog, mem, 200_000)
    assert result.ok, result.reason
    return result.memory[out : out + w.shape[0]]


class TestOpcodes:
    def test_short_pairs(self):
        assert opposite_jump(0x74).mnemonic == "jne"
        assert opposite_jump(0x7F).mnemonic == "jle"
        assert opposite_jump(0x7C).mnemonic == "jge"

    def test_near_pairs(self):
        op = opposite_jump(0x0F84)
        assert op.mnemonic == "jne"
        assert op.near

    def test_involution(self):
        for op in OPCODES.values():
            if op.conditional:
                assert opposite_jump(opposite_jump(op)) == op

    def test_not_conditional(self):
        with pytest.raises(NotConditionalError):
            opposite_jump(0xEB)
        with pytest.raises(NotConditionalError):
            opposite_jump(0x00)


class TestAssembler:
    def test_encoding(self):
        prog = assemble("LOADI r1, 5\nHALT")
        assert prog.bytecode == b"\xb8\x01\x05\x00\x00\x00\xf4"

    def test_short_jump_by_default(self):
        prog = assemble(COUNTDOWN)
        jumps = prog.conditional_jumps()
        assert [j.opcode.encoding for j in jumps] == [b"\x7f"]

    def test_promotes_far_jump(self):
        prog = assemble("JE far\n" + "NOP\n" * 200 + "far: HALT")
        assert prog.instructions()[0].opcode.encoding == b"\x0f\x84"
        assert prog.instructions()[0].target == prog.labels["far"]

    def test_forced_short_out_of_range(self):
        with pytest.raises(AssemblyRangeError):
            assemble("JE.s far\n" + "NOP\n" * 200 + "far: HALT")

    def test_forced_near(self):
        prog = assemble("JE.n done\ndone: HALT")
        assert len(prog.bytecode) == 7

    def test_parse_error_line(self):
        with pytest.raises(AssemblyParseError) as exc:
            assemble("NOP\nFROB r1, r2\n")
        assert exc.value.line == 2

    def test_undefined_label(self):
        with pytest.raises(AssemblyParseError):
            assemble("JMP nowhere")

    def test_kernel_decodes(self, kernel):
        assert linear_decode(kernel.bytecode)
        assert len(kernel.conditional_jumps()) == 17
        assert kernel.entry == kernel.labels["start"]


class TestExecute:
    def test_countdown(self):
        result = execute(assemble(COUNTDOWN), [99])
        assert result.ok
        assert result.memory[0] == 0
        assert result.steps == 3 + 5 * 3 + 2

    def test_timeout_hits_budget(self):
        result = execute(assemble("loop: JMP loop"), [], step_budget=50)
        assert result.status is Outcome.TIMEOUT
        assert result.steps == 50

    def test_halt_on_last_step_is_timeout(self):
        result = execute(assemble("NOP\nHALT"), [], step_budget=2)
        assert result.status is Outcome.TIMEOUT

    def test_invalid_opcode(self):
        result = execute(Program(b"\x90\xff"), [])
        assert result.status is Outcome.CRASH
        assert result.reason is CrashReason.INVALID_OPCODE
        assert result.steps == 1

    def test_out_of_bounds(self):
        result = execute(assemble("LOADI r0, 100\nLOAD r1, [r0+0]\nHALT"), [0])
        assert result.reason is CrashReason.OUT_OF_BOUNDS_MEMORY

    def test_running_off_the_end(self):
        result = execute(assemble("NOP"), [])
        assert result.reason is CrashReason.BAD_JUMP_TARGET

    def test_int32_wrap(self):
        prog = assemble("LOADI r0, 0\nLOADI r1, 0x7fffffff\nLOADI r2, 1\nADD r1, r2\nSTORE [r0+0], r1\nHALT")
        assert execute(prog, [0]).memory[0] == -(1 << 31)

    def test_input_memory_untouched(self):
        mem = [1]
        execute(assemble("LOADI r0, 0\nSTORE [r0+0], r0\nHALT"), mem)
        assert mem == [1]


class TestGemvKernel:
    def test_matches_oracle(self, kernel):
        rng = np.random.default_rng(0)
        w = rng.integers(-127, 128, size=(5, 70))
        x = rng.integers(-127, 128, size=70)
        b = rng.integers(-1000, 1000, size=5)
        assert np.array_equal(_gemv(kernel, w, x, b), gemv_oracle(w, x, b))

    def test_saturation(self, kernel):
        w = np.full((1, 4), 127)
        x = np.full(4, 127)
        b = np.array([(1 << 30) - 10])
        assert _gemv(kernel, w, x, b)[0] == 1 << 30

    def test_no_bias(self, kernel):
        w = np.array([[1, 2], [3, 4]])
        x = np.array([5, 6])
        assert _gemv(kernel, w, x, None).tolist() == [17, 39]

    def test_empty_rows(self, kernel):
        w = np.zeros((0, 3), dtype=np.int64)
        assert _gemv(kernel, w, np.zeros(3), np.zeros(0)).size == 0

    def test_random_shapes_match_oracle(self, kernel):
        rng = np.random.default_rng(1)
        for _ in range(200):
            m, k = int(rng.integers(1, 7)), int(rng.integers(1, 140))
            w = rng.integers(-127, 128, size=(m, k))
            x = rng.integers(-127, 128, size=k)
            b = rng.integers(-(1 << 20), 1 << 20, size=m)
            assert np.array_equal(_gemv(kernel, w, x, b), gemv_oracle(w, x, b))

    def test_uses_every_condition_form(self, kernel):
        forms = {j.opcode.mnemonic for j in kernel.conditional_jumps()}
        assert forms == {"je", "jne", "jl", "jge", "jle", "jg"}


class TestNopInsertion:
    def test_semantics_preserved(self, kernel):
        w = np.array([[1, 2, 3], [4, 5, 6]])
        x = np.array([1, -1, 2])
        b = np.array([7, -7])
        jumps = [j.offset for j in kernel.conditional_jumps()]
        rewrite = insert_nops_many(kernel, {jumps[0]: 3, jumps[5]: 16, kernel.entry: 2})
        assert np.array_equal(_gemv(rewrite.program, w, x, b), _gemv(kernel, w, x, b))
        assert len(rewrite.program.bytecode) >= len(kernel.bytecode) + 21

    def test_entry_runs_the_nops(self):
        prog = assemble("LOADI r0, 0\nHALT")
        rewrite = insert_nops_many(prog, {0: 4})
        assert rewrite.program.entry == 0
        assert execute(rewrite.program, []).steps == execute(prog, []).steps + 4

    def test_offsets_map(self):
        prog = assemble("NOP\nHALT")
        rewrite = insert_nops_many(prog, {1: 3})
        assert rewrite.offsets == {0: 0, 1: 4, 2: 5}

    def test_mid_instruction(self):
        prog = assemble("LOADI r0, 0\nHALT")
        with pytest.raises(NotInstructionBoundaryError):
            insert_nops_many(prog, {2: 1})

    def test_short_jump_promoted(self):
        prog = assemble("JE done\nNOP\ndone: HALT")
        rewrite = insert_nops_many(prog, {2: 200})
        assert rewrite.program.instructions()[0].opcode.near
