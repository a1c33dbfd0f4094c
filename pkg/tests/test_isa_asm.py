import pytest
from hypothesis import given, settings, strategies as st

from conftest import build
from ratelsim.abi import MASK64
from ratelsim.asm import assemble, disassemble
from ratelsim.binfmt import GuestBinary
from ratelsim.errors import BinaryFormatError, GuestFault, ParseError, UndefinedLabel
from ratelsim.isa import (BY_CODE, F_I, F_MEM, F_NONE, F_R, F_RI, F_RR, ILLEGAL, IMM_MAX,
                          IMM_MIN, NEXT, OPCODES, SIGRET, SYSCALL, GuestContext, Instr,
                          decode, encode, execute, step)
from ratelsim.oracle import FlatMemory
from ratelsim.programs import load_corpus


def _instr_strategy():
    def fill(name):
        code, shape = OPCODES[name]
        reg = st.integers(0, 15)
        imm = st.integers(IMM_MIN, IMM_MAX)
        if shape == F_NONE:
            return st.just(Instr(code))
        if shape == F_R:
            return reg.map(lambda a: Instr(code, a))
        if shape == F_RR:
            return st.tuples(reg, reg).map(lambda t: Instr(code, t[0], t[1]))
        if shape == F_RI:
            return st.tuples(reg, imm).map(lambda t: Instr(code, t[0], 0, t[1]))
        if shape == F_I:
            return imm.map(lambda i: Instr(code, 0, 0, i))
        return st.tuples(reg, reg, imm).map(lambda t: Instr(code, *t))
    return st.sampled_from(sorted(OPCODES)).flatmap(fill)


@settings(max_examples=300)
@given(_instr_strategy())
def test_encode_decode_roundtrip(ins):
    word = encode(ins)
    assert len(word) == 8
    assert decode(word) == ins


@settings(max_examples=300)
@given(st.binary(min_size=8, max_size=8))
def test_decode_is_canonical(word):
    try:
        ins = decode(word)
    except GuestFault as f:
        assert f.kind == "decode"
    else:
        assert encode(ins) == word


def test_encode_rejects_out_of_range():
    with pytest.raises(ValueError):
        encode(Instr(0x01, 1, 0, IMM_MAX + 1))
    with pytest.raises(ValueError):
        encode(Instr(0xEE))
    with pytest.raises(ValueError):
        encode(Instr(0x03, 16, 0))


def _mem():
    m = FlatMemory()
    m.map(0x1000, 0x2000, 7)
    return m


_ALU = {"add": lambda a, b: (a + b) & MASK64, "sub": lambda a, b: (a - b) & MASK64,
        "mul": lambda a, b: (a * b) & MASK64, "and": lambda a, b: a & b,
        "or": lambda a, b: a | b, "xor": lambda a, b: a ^ b}


@settings(max_examples=200)
@given(st.sampled_from(sorted(_ALU)), st.integers(0, MASK64), st.integers(0, MASK64))
def test_alu_matches_python_arithmetic(name, a, b):
    ctx = GuestContext(pc=0x400000)
    ctx.regs[1], ctx.regs[2] = a, b
    assert execute(ctx, Instr(OPCODES[name][0], 1, 2), _mem()) is NEXT
    want = _ALU[name](a, b)
    assert ctx.regs[1] == want
    assert ctx.zf == (want == 0)
    assert ctx.pc == 0x400008


@given(st.integers(0, MASK64), st.integers(1, MASK64))
def test_div_is_unsigned_floor(a, b):
    ctx = GuestContext()
    ctx.regs[1], ctx.regs[2] = a, b
    execute(ctx, Instr(OPCODES["div"][0], 1, 2), _mem())
    assert ctx.regs[1] == a // b


def test_div_by_zero_leaves_context_untouched():
    ctx = GuestContext(pc=0x400010)
    ctx.regs[1] = 5
    before = ctx.copy()
    with pytest.raises(GuestFault) as e:
        execute(ctx, Instr(OPCODES["div"][0], 1, 2), _mem())
    assert e.value.kind == "div0" and e.value.va == 0x400010
    assert ctx == before


def test_call_ret_and_memory():
    mem = _mem()
    ctx = GuestContext(pc=0x400000)
    ctx.regs[15] = 0x2000
    execute(ctx, Instr(OPCODES["call"][0], imm=0x400100), mem)
    assert ctx.pc == 0x400100 and ctx.regs[15] == 0x1FF8
    assert mem.load(0x1FF8, 8) == 0x400008
    execute(ctx, Instr(OPCODES["ret"][0]), mem)
    assert ctx.pc == 0x400008 and ctx.regs[15] == 0x2000
    ctx.regs[1] = 0x1122334455667788
    ctx.regs[2] = 0x1800
    execute(ctx, Instr(OPCODES["stb"][0], 1, 2, 3), mem)
    execute(ctx, Instr(OPCODES["ldb"][0], 4, 2, 3), mem)
    assert ctx.regs[4] == 0x88


def test_special_instructions_stop_with_pc_in_place():
    ctx = GuestContext(pc=0x400000)
    assert execute(ctx, Instr(OPCODES["sys"][0]), _mem()) is SYSCALL
    assert execute(ctx, Instr(OPCODES["sigret"][0]), _mem()) is SIGRET
    assert execute(ctx, Instr(OPCODES["rdtime"][0], 1), _mem()) is ILLEGAL
    assert execute(ctx, Instr(OPCODES["wrsb0"][0], 1), _mem()) is ILLEGAL
    assert ctx.pc == 0x400000
    ctx.regs[1] = 77
    execute(ctx, Instr(OPCODES["wrsb0"][0], 1), _mem(), privileged=True)
    assert ctx.sb0 == 77


def test_step_is_pure():
    mem = _mem()
    mem.write(0x1000, encode(Instr(OPCODES["movi"][0], 3, 0, 42)))
    ctx = GuestContext(pc=0x1000)
    r = step(ctx, mem)
    assert r.ctx.regs[3] == 42 and ctx.regs[3] == 0
    mem.write(0x1008, b"\xff" * 8)
    r = step(r.ctx, mem)
    assert r.kind == "fault" and r.fault.kind == "decode"


class TestAssembler:
    def test_labels_equ_and_data(self):
        b = assemble("""
.equ N, 3
.code
_start: movi g1, N ; movi g2, msg+1 ; jmp _start
.data
msg: .ascii "hi"
val: .quad 7, msg
""")
        code = b.segments[0]
        assert b.entry == code.preferred_va == 0x400000
        ins = [decode(code.data[i:i + 8]) for i in range(0, len(code.data), 8)]
        data = b.segments[1]
        assert ins[0] == Instr(OPCODES["movi"][0], 1, 0, 3)
        assert ins[1].imm == data.preferred_va + 1
        assert ins[2].imm == 0x400000
        assert data.data[:2] == b"hi"
        assert int.from_bytes(data.data[2:10], "little") == 7
        assert int.from_bytes(data.data[10:18], "little") == data.preferred_va

    def test_errors_carry_positions(self):
        with pytest.raises(UndefinedLabel):
            assemble(".code\n  jmp nowhere\n")
        with pytest.raises(ParseError) as e:
            assemble(".code\n  movi g99, 1\n")
        assert e.value.line == 2
        with pytest.raises(ParseError):
            assemble(".code\n  frob g1\n")
        with pytest.raises(ParseError):
            assemble('.include "x.s"\n')

    def test_include_is_textual(self):
        b = build('.include "lib.s"\n.code\n_start:\n    movi g1, SYS_WRITE\n')
        assert b.entry > 0x400000

    @pytest.mark.parametrize("prog", load_corpus(), ids=lambda p: p.name)
    def test_disassembly_reassembles_identically(self, prog):
        b = prog.binary()
        again = assemble(disassemble(b))
        assert again.to_bytes() == b.to_bytes()


class TestBinaryFormat:
    def test_roundtrip(self, tmp_path):
        b = build('.include "lib.s"\n.code\n_start: nop\n.bss\nbuf: .zero 100\n')
        path = tmp_path / "p.gb64"
        b.save(str(path))
        c = GuestBinary.load(str(path))
        assert c.to_bytes() == b.to_bytes()
        assert c.entry == b.entry
        assert [s.kind for s in c.segments] == [s.kind for s in b.segments]

    def test_rejects_garbage(self):
        with pytest.raises(BinaryFormatError):
            GuestBinary.from_bytes(b"ELF\x7f" + bytes(40))
        raw = build(".code\n_start: nop\n").to_bytes()
        with pytest.raises(BinaryFormatError):
            GuestBinary.from_bytes(raw[:-3])

    def test_shapes_are_complete(self):
        assert {shape for _c, shape in BY_CODE.values()} == {F_NONE, F_R, F_RR, F_RI, F_I, F_MEM}
