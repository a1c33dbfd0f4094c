"""GISA-64: a fixed-width (8 byte) guest instruction set.

Encoding, little-endian::

    byte 0      opcode
    byte 1      ra << 4 | rb
    bytes 2..7  48-bit signed immediate

Fields an opcode does not use must be zero; anything else fails to decode,
which keeps disassembly lossless.
"""
from dataclasses import dataclass, field

from .abi import MASK64
from .errors import GuestFault

INSN_SIZE = 8
IMM_BITS = 48
IMM_MIN = -(1 << (IMM_BITS - 1))
IMM_MAX = (1 << (IMM_BITS - 1)) - 1
NREGS = 16
SP = 15

# operand shapes
F_NONE = "none"        # ret, sys, sigret, nop
F_R = "r"              # rdtime ra
F_RR = "rr"            # add ra, rb
F_RI = "ri"            # movi ra, imm
F_MEM = "mem"          # ld ra, [rb+imm]
F_I = "i"              # jmp imm

OPCODES = {
    "movi": (0x01, F_RI),
    "mov": (0x02, F_RR),
    "add": (0x03, F_RR),
    "sub": (0x04, F_RR),
    "mul": (0x05, F_RR),
    "div": (0x06, F_RR),
    "and": (0x07, F_RR),
    "or": (0x08, F_RR),
    "xor": (0x09, F_RR),
    "cmp": (0x0A, F_RR),
    "ld": (0x10, F_MEM),
    "st": (0x11, F_MEM),
    "ldb": (0x12, F_MEM),
    "stb": (0x13, F_MEM),
    "jmp": (0x20, F_I),
    "jz": (0x21, F_I),
    "jnz": (0x22, F_I),
    "call": (0x23, F_I),
    "ret": (0x24, F_NONE),
    "sys": (0x30, F_NONE),
    "rdtime": (0x31, F_R),
    "cpuinfo": (0x32, F_R),
    "rdsb0": (0x33, F_R),
    "rdsb1": (0x34, F_R),
    "wrsb0": (0x35, F_R),
    "wrsb1": (0x36, F_R),
    "sigret": (0x37, F_NONE),
    "nop": (0x3F, F_NONE),
}
BY_CODE = {code: (name, shape) for name, (code, shape) in OPCODES.items()}

OP_MOVI, OP_MOV, OP_ADD, OP_SUB, OP_MUL, OP_DIV = 0x01, 0x02, 0x03, 0x04, 0x05, 0x06
OP_AND, OP_OR, OP_XOR, OP_CMP = 0x07, 0x08, 0x09, 0x0A
OP_LD, OP_ST, OP_LDB, OP_STB = 0x10, 0x11, 0x12, 0x13
OP_JMP, OP_JZ, OP_JNZ, OP_CALL, OP_RET = 0x20, 0x21, 0x22, 0x23, 0x24
OP_SYS, OP_RDTIME, OP_CPUINFO = 0x30, 0x31, 0x32
OP_RDSB0, OP_RDSB1, OP_WRSB0, OP_WRSB1 = 0x33, 0x34, 0x35, 0x36
OP_SIGRET, OP_NOP = 0x37, 0x3F

BRANCHES = frozenset((OP_JMP, OP_JZ, OP_JNZ, OP_CALL, OP_RET))
# illegal inside an enclave; the engine replaces them with stubs
ILLEGAL_IN_ENCLAVE = frozenset((OP_RDTIME, OP_CPUINFO, OP_WRSB0, OP_WRSB1))

# step outcomes
NEXT = "next"
SYSCALL = "syscall"
ILLEGAL = "illegal"
SIGRET = "sigret"
FAULT = "fault"


@dataclass
class GuestContext:
    pc: int = 0
    regs: list = field(default_factory=lambda: [0] * NREGS)
    sb0: int = 0
    sb1: int = 0
    zf: bool = False

    def copy(self):
        return GuestContext(self.pc, list(self.regs), self.sb0, self.sb1, self.zf)

    @property
    def sp(self):
        return self.regs[SP]


@dataclass(frozen=True)
class Instr:
    op: int
    ra: int = 0
    rb: int = 0
    imm: int = 0

    @property
    def name(self):
        return BY_CODE[self.op][0]

    def __str__(self):
        return format_instr(self)


def encode(ins):
    if ins.op not in BY_CODE:
        raise ValueError(f"unknown opcode {ins.op:#x}")
    if not IMM_MIN <= ins.imm <= IMM_MAX:
        raise ValueError(f"immediate {ins.imm} out of 48-bit range")
    if not (0 <= ins.ra < NREGS and 0 <= ins.rb < NREGS):
        raise ValueError("register out of range")
    imm = ins.imm & ((1 << IMM_BITS) - 1)
    return bytes((ins.op, (ins.ra << 4) | ins.rb)) + imm.to_bytes(6, "little")


def decode(word, va=0):
    """Decode 8 bytes into an :class:`Instr`; raise a decode GuestFault."""
    if len(word) != INSN_SIZE:
        raise GuestFault("decode", va, f"short instruction at {va:#x}")
    entry = BY_CODE.get(word[0])
    if entry is None:
        raise GuestFault("decode", va, f"bad opcode {word[0]:#x} at {va:#x}")
    shape = entry[1]
    ra, rb = word[1] >> 4, word[1] & 0xF
    imm = int.from_bytes(word[2:8], "little", signed=True)
    if shape == F_NONE:
        ok = ra == rb == imm == 0
    elif shape == F_R:
        ok = rb == imm == 0
    elif shape == F_RR:
        ok = imm == 0
    elif shape == F_RI:
        ok = rb == 0
    elif shape == F_I:
        ok = ra == rb == 0
    else:
        ok = True
    if not ok:
        raise GuestFault("decode", va, f"non-canonical encoding at {va:#x}")
    return Instr(word[0], ra, rb, imm)


def format_instr(ins):
    name, shape = BY_CODE[ins.op]
    if shape == F_NONE:
        return name
    if shape == F_R:
        return f"{name} g{ins.ra}"
    if shape == F_RR:
        return f"{name} g{ins.ra}, g{ins.rb}"
    if shape == F_RI:
        return f"{name} g{ins.ra}, {ins.imm}"
    if shape == F_I:
        return f"{name} {ins.imm:#x}" if ins.imm >= 0 else f"{name} {ins.imm}"
    sign = "+" if ins.imm >= 0 else "-"
    return f"{name} g{ins.ra}, [g{ins.rb}{sign}{abs(ins.imm)}]"


def execute(ctx, ins, mem, privileged=False):
    """Execute one decoded instruction in place.

    ``mem`` provides ``load(va, size)`` and ``store(va, size, value)``.
    Returns NEXT (pc advanced) or SYSCALL / ILLEGAL / SIGRET with the pc
    left on the instruction so the caller can service it. Memory faults and
    divide-by-zero raise :class:`GuestFault` with ``ctx`` untouched.
    """
    op = ins.op
    r = ctx.regs
    if op <= OP_CMP:
        a, b = ins.ra, ins.rb
        if op == OP_MOVI:
            r[a] = ins.imm & MASK64
            ctx.pc += 8
            return NEXT
        if op == OP_MOV:
            r[a] = r[b]
            ctx.pc += 8
            return NEXT
        if op == OP_ADD:
            v = (r[a] + r[b]) & MASK64
        elif op == OP_SUB:
            v = (r[a] - r[b]) & MASK64
        elif op == OP_CMP:
            ctx.zf = r[a] == r[b]
            ctx.pc += 8
            return NEXT
        elif op == OP_MUL:
            v = (r[a] * r[b]) & MASK64
        elif op == OP_DIV:
            if r[b] == 0:
                raise GuestFault("div0", ctx.pc)
            v = r[a] // r[b]
        elif op == OP_AND:
            v = r[a] & r[b]
        elif op == OP_OR:
            v = r[a] | r[b]
        elif op == OP_XOR:
            v = r[a] ^ r[b]
        else:
            raise GuestFault("decode", ctx.pc)
        r[a] = v
        ctx.zf = v == 0
        ctx.pc += 8
        return NEXT
    if op <= OP_STB:
        addr = (r[ins.rb] + ins.imm) & MASK64
        if op == OP_LD:
            r[ins.ra] = mem.load(addr, 8)
        elif op == OP_ST:
            mem.store(addr, 8, r[ins.ra])
        elif op == OP_LDB:
            r[ins.ra] = mem.load(addr, 1)
        else:
            mem.store(addr, 1, r[ins.ra] & 0xFF)
        ctx.pc += 8
        return NEXT
    if op <= OP_RET:
        if op == OP_JMP:
            ctx.pc = ins.imm
        elif op == OP_JZ:
            ctx.pc = ins.imm if ctx.zf else ctx.pc + 8
        elif op == OP_JNZ:
            ctx.pc = ins.imm if not ctx.zf else ctx.pc + 8
        elif op == OP_CALL:
            sp = (r[SP] - 8) & MASK64
            mem.store(sp, 8, ctx.pc + 8)
            r[SP] = sp
            ctx.pc = ins.imm
        else:
            target = mem.load(r[SP], 8)
            r[SP] = (r[SP] + 8) & MASK64
            ctx.pc = target
        return NEXT
    if op == OP_SYS:
        return SYSCALL
    if op == OP_NOP:
        ctx.pc += 8
        return NEXT
    if op == OP_SIGRET:
        return SIGRET
    if op == OP_RDSB0:
        r[ins.ra] = ctx.sb0
        ctx.pc += 8
        return NEXT
    if op == OP_RDSB1:
        r[ins.ra] = ctx.sb1
        ctx.pc += 8
        return NEXT
    if privileged and op in (OP_WRSB0, OP_WRSB1):
        if op == OP_WRSB0:
            ctx.sb0 = r[ins.ra]
        else:
            ctx.sb1 = r[ins.ra]
        ctx.pc += 8
        return NEXT
    if op in ILLEGAL_IN_ENCLAVE:
        return ILLEGAL
    raise GuestFault("decode", ctx.pc)


@dataclass
class StepResult:
    kind: str
    ctx: GuestContext
    instr: Instr = None
    fault: GuestFault = None


def step(ctx, mem):
    """Pure single step: returns a new context, never mutates ``ctx``.

    Stores still land in ``mem``; syscall/illegal/sigret are surfaced with
    the pc on the instruction.
    """
    nctx = ctx.copy()
    try:
        ins = decode(mem.fetch(ctx.pc), ctx.pc)
        kind = execute(nctx, ins, mem)
    except GuestFault as f:
        return StepResult(FAULT, ctx.copy(), None, f)
    return StepResult(kind, nctx, ins)
