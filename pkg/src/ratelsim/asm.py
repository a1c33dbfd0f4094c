"""Two-pass text assembler and a lossless disassembler for GISA-64.

Source syntax::

    # comment to end of line; ';' separates statements on one line
    .equ SYS_WRITE, 1
    .code                 # new segment (also .data / .bss), optional VA operand
    .at 0x400000          # preferred VA of the current segment
    _start: movi g0, SYS_WRITE ; movi g1, 1 ; movi g2, msg ; movi g3, 3 ; sys
            ld g4, [g2+8]
    .data
    msg: .ascii "hi\\n"
    val: .quad 7, msg+8

Other directives: ``.byte``, ``.asciz``, ``.zero N``, ``.align N``,
``.reserve N`` (memory length without file bytes, segment tail only),
``.perms rwx``, ``.entry <expr>`` and ``.include "file"`` (textual, relative
to the including file). Registers are ``g0``..``g15``; ``sp``
aliases ``g15``.
"""
import ast
import os
import re

from . import isa
from .abi import CODE_DEFAULT, PROT_EXEC, PROT_READ, PROT_WRITE, page_up
from .binfmt import DEFAULT_PERMS, GuestBinary, Segment
from .errors import ParseError, UndefinedLabel

_LABEL = re.compile(r"\s*([A-Za-z_.$][\w.$]*)\s*:(?!:)")
_NAME = re.compile(r"[A-Za-z_.$][\w.$]*$")
_REG = re.compile(r"(?:g(\d+)|sp)$")
_MEM = re.compile(r"\[\s*([^\]+\-\s]+)\s*(?:([+-])\s*(.+?))?\s*\]$")


def _split_outside_quotes(text, sep):
    parts, cur, quote, i = [], [], None, 0
    positions = [0]
    while i < len(text):
        c = text[i]
        if quote:
            cur.append(c)
            if c == "\\" and i + 1 < len(text):
                cur.append(text[i + 1])
                i += 1
            elif c == quote:
                quote = None
        elif c in "\"'":
            quote = c
            cur.append(c)
        elif c in sep:
            parts.append("".join(cur))
            cur = []
            positions.append(i + 1)
        else:
            cur.append(c)
        i += 1
    parts.append("".join(cur))
    return list(zip(parts, positions))


def _strip_comment(line):
    return _split_outside_quotes(line, "#")[0][0]


def _parse_reg(tok, ln, col):
    m = _REG.match(tok.strip())
    if not m:
        raise ParseError(f"expected register, got {tok.strip()!r}", ln, col)
    if m.group(1) is None:
        return isa.SP
    n = int(m.group(1))
    if n >= isa.NREGS:
        raise ParseError(f"no such register g{n}", ln, col)
    return n


def _parse_string(tok, ln, col):
    tok = tok.strip()
    if len(tok) < 2 or tok[0] != '"' or tok[-1] != '"':
        raise ParseError("expected string literal", ln, col)
    try:
        return ast.literal_eval("b" + tok)
    except (SyntaxError, ValueError) as e:
        raise ParseError(f"bad string literal: {e}", ln, col)


class _Stmt:
    __slots__ = ("op", "args", "line", "col", "offset", "seg")

    def __init__(self, op, args, line, col):
        self.op, self.args, self.line, self.col = op, args, line, col


class _Seg:
    def __init__(self, kind, va, line):
        self.kind = kind
        self.va = va
        self.perms = DEFAULT_PERMS[kind]
        self.size = 0
        self.reserve = 0
        self.stmts = []
        self.line = line


class Assembler:
    def __init__(self, source):
        self.source = source
        self.symbols = {}
        self.equs = {}
        self.segs = []
        self.entry = None

    # -- expressions -------------------------------------------------------
    def eval(self, expr, ln, col, allow_labels=True):
        expr = expr.strip()
        if not expr:
            raise ParseError("empty expression", ln, col)
        terms = re.findall(r"([+-]?)\s*('(?:\\.|[^'])'|[^+\-\s]+)", expr)
        if not terms or "".join(s + t for s, t in terms).replace(" ", "") != expr.replace(" ", ""):
            raise ParseError(f"cannot parse expression {expr!r}", ln, col)
        total = 0
        for sign, term in terms:
            v = self._term(term, ln, col, allow_labels)
            total = total - v if sign == "-" else total + v
        return total

    def _term(self, term, ln, col, allow_labels):
        if term[0] == "'":
            s = ast.literal_eval(term)
            if len(s) != 1:
                raise ParseError(f"bad char literal {term}", ln, col)
            return ord(s)
        if term[0].isdigit():
            try:
                return int(term, 0)
            except ValueError:
                raise ParseError(f"bad number {term!r}", ln, col)
        if not _NAME.match(term):
            raise ParseError(f"bad token {term!r}", ln, col)
        if term in self.equs:
            return self.equs[term]
        if allow_labels and term in self.symbols:
            return self.symbols[term]
        if not allow_labels:
            raise ParseError(f"{term!r} must be a constant here", ln, col)
        raise UndefinedLabel(f"undefined label {term!r}", ln, col)

    # -- pass 1 ------------------------------------------------------------
    def _cur(self, ln):
        if not self.segs:
            self.segs.append(_Seg("code", None, ln))
        return self.segs[-1]

    def parse(self):
        labels = {}
        for ln, raw in enumerate(self.source.splitlines(), 1):
            body = _strip_comment(raw)
            for text, pos in _split_outside_quotes(body, ";"):
                col = pos + 1
                while True:
                    m = _LABEL.match(text)
                    if not m:
                        break
                    name = m.group(1)
                    if name in labels or name in self.equs:
                        raise ParseError(f"duplicate label {name!r}", ln, col)
                    seg = self._cur(ln)
                    labels[name] = (seg, seg.size)
                    if seg.reserve:
                        raise ParseError("label after .reserve", ln, col)
                    text = text[m.end():]
                    col += m.end()
                text = text.strip()
                if text:
                    self._statement(text, ln, col)
        return labels

    def _statement(self, text, ln, col):
        parts = text.split(None, 1)
        op = parts[0].lower()
        rest = parts[1] if len(parts) > 1 else ""
        args = [a.strip() for a, _ in _split_outside_quotes(rest, ",")] if rest.strip() else []
        if op in (".code", ".data", ".bss"):
            va = self.eval(args[0], ln, col, False) if args else None
            self.segs.append(_Seg(op[1:], va, ln))
            return
        if op == ".equ":
            if len(args) != 2 or not _NAME.match(args[0]):
                raise ParseError(".equ needs NAME, value", ln, col)
            self.equs[args[0]] = self.eval(args[1], ln, col, False)
            return
        if op == ".entry":
            self.entry = (args, ln, col)
            return
        seg = self._cur(ln)
        if op == ".at":
            if seg.size or seg.stmts:
                raise ParseError(".at after segment content", ln, col)
            seg.va = self.eval(args[0], ln, col, False)
            return
        if op == ".perms":
            p = args[0] if args else ""
            if not re.fullmatch(r"[r-][w-][x-]", p):
                raise ParseError("perms must look like rwx / r-x", ln, col)
            seg.perms = ((PROT_READ if p[0] == "r" else 0) | (PROT_WRITE if p[1] == "w" else 0)
                         | (PROT_EXEC if p[2] == "x" else 0))
            return
        if seg.reserve:
            raise ParseError("content after .reserve", ln, col)
        st = _Stmt(op, args, ln, col)
        st.offset = seg.size
        if op in (".zero", ".reserve"):
            n = self.eval(args[0], ln, col, False)
            if n < 0:
                raise ParseError("negative size", ln, col)
            if op == ".reserve" or seg.kind == "bss":
                seg.reserve += n
                return
            size = n
        elif op == ".align":
            n = self.eval(args[0], ln, col, False)
            if n <= 0:
                raise ParseError("alignment must be positive", ln, col)
            size = (-seg.size) % n
            if seg.kind == "bss":
                seg.reserve += size
                return
        elif seg.kind == "bss":
            raise ParseError(f"{op} not allowed in .bss", ln, col)
        elif op == ".quad":
            size = 8 * len(args)
        elif op == ".byte":
            size = len(args)
        elif op in (".ascii", ".asciz"):
            size = len(_parse_string(args[0] if args else "", ln, col)) + (op == ".asciz")
        elif op.startswith("."):
            raise ParseError(f"unknown directive {op}", ln, col)
        elif op in isa.OPCODES:
            size = isa.INSN_SIZE
        else:
            raise ParseError(f"unknown mnemonic {op!r}", ln, col)
        seg.size += size
        seg.stmts.append(st)

    # -- layout ------------------------------------------------------------
    def layout(self, labels):
        nxt = CODE_DEFAULT
        for seg in self.segs:
            if seg.va is None:
                seg.va = nxt
            if seg.va % 4096:
                raise ParseError(f"segment VA {seg.va:#x} not page aligned", seg.line, 1)
            nxt = page_up(seg.va + seg.size + seg.reserve)
        for name, (seg, off) in labels.items():
            self.symbols[name] = seg.va + off

    # -- pass 2 ------------------------------------------------------------
    def emit(self):
        segs = []
        for seg in self.segs:
            if seg.kind == "bss" and seg.reserve == 0 and not seg.stmts:
                continue
            out = bytearray()
            for st in seg.stmts:
                out += self._emit_stmt(st, seg.va + st.offset)
            segs.append(Segment(seg.va, len(out) + seg.reserve, seg.perms, seg.kind, bytes(out)))
        return segs

    def _emit_stmt(self, st, va):
        op, a, ln, col = st.op, st.args, st.line, st.col
        if op == ".zero":
            return bytes(self.eval(a[0], ln, col, False))
        if op == ".align":
            n = self.eval(a[0], ln, col, False)
            return bytes((-st.offset) % n)
        if op == ".quad":
            return b"".join((self.eval(x, ln, col) & ((1 << 64) - 1)).to_bytes(8, "little")
                            for x in a)
        if op == ".byte":
            out = bytearray()
            for x in a:
                v = self.eval(x, ln, col)
                if not -128 <= v <= 255:
                    raise ParseError(f"byte value {v} out of range", ln, col)
                out.append(v & 0xFF)
            return bytes(out)
        if op in (".ascii", ".asciz"):
            s = _parse_string(a[0], ln, col)
            return s + (b"\0" if op == ".asciz" else b"")
        code, shape = isa.OPCODES[op]
        want = {isa.F_NONE: 0, isa.F_R: 1, isa.F_RR: 2, isa.F_RI: 2, isa.F_MEM: 2, isa.F_I: 1}[shape]
        if len(a) != want:
            raise ParseError(f"{op} takes {want} operand(s), got {len(a)}", ln, col)
        ra = rb = imm = 0
        if shape in (isa.F_R, isa.F_RR, isa.F_RI, isa.F_MEM):
            ra = _parse_reg(a[0], ln, col)
        if shape == isa.F_RR:
            rb = _parse_reg(a[1], ln, col)
        elif shape == isa.F_RI:
            imm = self.eval(a[1], ln, col)
        elif shape == isa.F_I:
            imm = self.eval(a[0], ln, col)
        elif shape == isa.F_MEM:
            m = _MEM.match(a[1].strip())
            if not m:
                raise ParseError(f"bad memory operand {a[1]!r}", ln, col)
            rb = _parse_reg(m.group(1), ln, col)
            if m.group(3):
                imm = self.eval(m.group(3), ln, col)
                if m.group(2) == "-":
                    imm = -imm
        if not isa.IMM_MIN <= imm <= isa.IMM_MAX:
            raise ParseError(f"immediate {imm} does not fit in 48 bits", ln, col)
        return isa.encode(isa.Instr(code, ra, rb, imm))

    def run(self):
        labels = self.parse()
        self.layout(labels)
        segs = self.emit()
        if not segs:
            raise ParseError("empty program", 1, 1)
        if self.entry is not None:
            args, ln, col = self.entry
            entry = self.eval(args[0], ln, col)
        elif "_start" in self.symbols:
            entry = self.symbols["_start"]
        else:
            code = [s for s in segs if s.kind == "code"]
            if not code:
                raise ParseError("no code segment", 1, 1)
            entry = code[0].preferred_va
        try:
            return GuestBinary(entry, segs).validate()
        except Exception as e:
            raise ParseError(str(e), 1, 1)


_INCLUDE = re.compile(r'\s*\.include\s+"([^"]+)"\s*(?:#.*)?$')


def expand_includes(source, base_dir, depth=0):
    """Inline ``.include "file"`` lines, resolved relative to ``base_dir``."""
    if depth > 8:
        raise ParseError("includes nested too deeply", 1, 1)
    out = []
    for ln, line in enumerate(source.splitlines(), 1):
        m = _INCLUDE.match(line)
        if not m:
            out.append(line)
            continue
        if base_dir is None:
            raise ParseError(".include needs a base directory", ln, 1)
        path = os.path.join(base_dir, m.group(1))
        try:
            with open(path) as f:
                text = f.read()
        except OSError as e:
            raise ParseError(f"cannot include {m.group(1)}: {e.strerror}", ln, 1) from None
        out.append(expand_includes(text, os.path.dirname(path), depth + 1))
    return "\n".join(out)


def assemble(source, base_dir=None):
    """Assemble GISA-64 text into a :class:`GuestBinary`."""
    if ".include" in source:
        source = expand_includes(source, base_dir)
    return Assembler(source).run()


def assemble_file(path):
    with open(path) as f:
        return assemble(f.read(), os.path.dirname(os.path.abspath(path)))


def _perm_str(p):
    return ("r" if p & PROT_READ else "-") + ("w" if p & PROT_WRITE else "-") + \
        ("x" if p & PROT_EXEC else "-")


def disassemble(binary):
    """Render a binary back to source that assembles to identical bytes."""
    lines = [f".entry {binary.entry:#x}"]
    for seg in binary.segments:
        lines.append(f".{seg.kind}")
        lines.append(f".at {seg.preferred_va:#x}")
        if seg.perms != DEFAULT_PERMS[seg.kind]:
            lines.append(f".perms {_perm_str(seg.perms)}")
        data = seg.data
        if seg.kind == "code":
            i = 0
            while i + 8 <= len(data):
                word = data[i:i + 8]
                try:
                    lines.append("    " + isa.format_instr(isa.decode(word)))
                except Exception:
                    lines.append("    .byte " + ", ".join(str(b) for b in word))
                i += 8
            if i < len(data):
                lines.append("    .byte " + ", ".join(str(b) for b in data[i:]))
        else:
            for i in range(0, len(data), 16):
                lines.append("    .byte " + ", ".join(str(b) for b in data[i:i + 16]))
        tail = seg.length - len(data)
        if tail:
            lines.append(f"    .{'zero' if seg.kind == 'bss' else 'reserve'} {tail}")
    return "\n".join(lines) + "\n"
