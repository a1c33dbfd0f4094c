"""Syscall classification and two-copy marshaling across the trust boundary.

Every syscall the guest can issue has one :class:`SyscallSpec` loaded from
``data/syscalls.tbl``. Delegated calls are deep-copied into a public
staging arena, served by the host, copied back into private memory and only
then sanitized. The ordering is recorded in :attr:`Gateway.events` so tests
can check it.
"""
from dataclasses import dataclass, field
from importlib import resources

from .abi import E2BIG, EFAULT, MAX_ERRNO, page_up
from .errors import GuestFault, MarshalTooLarge, RatelError, SanitizeReject

MAX_MARSHAL = 1 << 20
MAX_CSTR = 4096
MODES = ("delegate", "partial", "emulate")
DEPTHS = ("value", "buffer", "record")


@dataclass(frozen=True)
class CopyDesc:
    arg: int
    direction: str   # "in" (private -> public) or "out" (public -> private)
    length: str      # "fixed", "arg", "ret", "nul"
    n: int = 0       # fixed size, or the argument index for arg/ret
    depth: str = "buffer"

    def __str__(self):
        rule = {"fixed": f"n{self.n}", "arg": f"a{self.n}", "ret": f"ret/a{self.n}",
                "nul": "nul"}[self.length]
        return f"a{self.arg}:{self.depth}:{rule}"


@dataclass(frozen=True)
class SyscallSpec:
    number: int
    name: str
    mode: str
    category: str
    nargs: int
    ocall: str
    marshal_in: tuple = ()
    marshal_out: tuple = ()
    sanitizer: str = "none"
    post: str = "-"


def _parse_desc(text, direction):
    if text == "-":
        return ()
    out = []
    for item in text.split(","):
        arg, depth, rule = item.split(":")
        if depth not in DEPTHS or not arg.startswith("a"):
            raise RatelError(f"bad copy descriptor {item!r}")
        if rule == "nul":
            length, n = "nul", 0
        elif rule.startswith("ret/a"):
            length, n = "ret", int(rule[5:])
        elif rule.startswith("a"):
            length, n = "arg", int(rule[1:])
        elif rule.startswith("n"):
            length, n = "fixed", int(rule[1:])
        else:
            raise RatelError(f"bad length rule {rule!r}")
        out.append(CopyDesc(int(arg[1:]), direction, length, n, depth))
    return tuple(out)


def parse_table(text):
    specs = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].split()
        if not line:
            continue
        nr, name, mode, cat, nargs, ocall, m_in, m_out, san, post = line
        if mode not in MODES:
            raise RatelError(f"bad mode {mode!r} for {name}")
        spec = SyscallSpec(int(nr), name, mode, cat, int(nargs), ocall,
                           _parse_desc(m_in, "in"), _parse_desc(m_out, "out"), san, post)
        if spec.number in specs:
            raise RatelError(f"duplicate spec for syscall {nr}")
        specs[spec.number] = spec
    return specs


def table_text():
    return resources.files("ratelsim").joinpath("data/syscalls.tbl").read_text()


TABLE = parse_table(table_text())
BY_NAME = {s.name: s for s in TABLE.values()}


def classify(number):
    """Mode of a syscall number, or None when unsupported."""
    spec = TABLE.get(number)
    return spec.mode if spec else None


def dump_table():
    rows = [f"{'nr':>4} {'name':<11} {'mode':<9} {'category':<9} {'ocall':<7} "
            f"{'in':<16} {'out':<18} sanitizer"]
    for s in sorted(TABLE.values(), key=lambda s: s.number):
        rows.append(f"{s.number:>4} {s.name:<11} {s.mode:<9} {s.category:<9} {s.ocall:<7} "
                    f"{','.join(map(str, s.marshal_in)) or '-':<16} "
                    f"{','.join(map(str, s.marshal_out)) or '-':<18} {s.sanitizer}")
    return "\n".join(rows)


# -- descriptor resolution, shared by both worlds -----------------------------

def resolve_in(spec, args, read):
    """Read every in-descriptor through ``read(va, n)``; returns a list of bytes.

    Raises GuestFault when the guest memory is unreadable and
    MarshalTooLarge when a length exceeds the marshal limit.
    """
    out = []
    for d in spec.marshal_in:
        va = args[d.arg]
        if d.length == "fixed":
            n = d.n
        elif d.length == "arg":
            n = args[d.n]
        elif d.length == "nul":
            buf = bytearray()
            while True:
                if len(buf) >= MAX_CSTR:
                    raise GuestFault("memory", va, "unterminated string argument")
                b = read(va + len(buf), 1)
                buf += b
                if b == b"\0":
                    break
            out.append(bytes(buf))
            continue
        else:
            raise RatelError("return-sized descriptor used for input")
        if n > MAX_MARSHAL:
            raise MarshalTooLarge(f"{spec.name}: {n} bytes")
        out.append(read(va, n) if n else b"")
    return out


def out_capacity(desc, args):
    n = args[desc.n] if desc.length in ("arg", "ret") else desc.n
    if n > MAX_MARSHAL:
        raise MarshalTooLarge(f"{n} bytes")
    return n


def call_digest(spec, args, in_bytes):
    from .trace import digest_bytes
    return digest_bytes(spec.number, *args[:spec.nargs], *in_bytes)


def errno_ok(ret):
    return ret >= -MAX_ERRNO


def sanitize_scalar(spec, args, ret):
    """Checks that need nothing but the returned value."""
    if not errno_ok(ret):
        raise SanitizeReject(f"{spec.name}: errno {ret} out of range")
    if spec.sanitizer.startswith("len/") and ret >= 0:
        limit = args[int(spec.sanitizer[5:])]
        if ret > limit:
            raise SanitizeReject(f"{spec.name}: returned length {ret} > requested {limit}")


# -- the enclave side ---------------------------------------------------------

class PublicStage:
    """Bump allocator over the public staging arena; zeroed after each call."""

    def __init__(self, machine, base, size):
        self.machine = machine
        self.base = base
        self.size = size
        self.used = 0
        self.peak = 0
        self.records = []

    def alloc(self, n):
        n8 = (n + 7) & ~7
        if self.used + n8 > self.size:
            raise MarshalTooLarge("public staging arena exhausted")
        va = self.base + self.used
        self.used += n8
        self.peak = max(self.peak, self.used)
        self.records.append((va, n))
        return va

    def release(self):
        if self.used:
            self.machine.write("engine", self.base, bytes(self.used))
        self.used = 0
        self.records = []

    def is_zero(self):
        return self.machine.read("engine", self.base, page_up(max(self.peak, 1))) == bytes(page_up(max(self.peak, 1)))


@dataclass
class StagedCall:
    spec: SyscallSpec
    args: list
    staged_args: list
    in_bytes: list
    in_slots: list = field(default_factory=list)    # (public va, n)
    out_slots: list = field(default_factory=list)   # (desc, public va, capacity)
    callno: int = 0


class Gateway:
    """Marshals calls for one engine instance."""

    def __init__(self, engine, stage):
        self.engine = engine
        self.stage = stage
        self.events = []
        self.calls = 0
        self.bytes_out = 0
        self.bytes_in = 0
        self.expected_out = 0
        self.expected_in = 0
        self.rejects = []

    def _log(self, kind, callno):
        self.events.append((kind, callno))

    def marshal_out(self, spec, args):
        eng = self.engine
        self.calls += 1
        eng.bounce_reset()
        in_bytes = resolve_in(spec, args, lambda va, n: eng.app_read(va, n, "read"))
        staged_args = list(args)
        call = StagedCall(spec, list(args), staged_args, in_bytes, callno=self.calls)
        for d, data in zip(spec.marshal_in, in_bytes):
            va = self.stage.alloc(max(len(data), 1))
            if data:
                eng.machine.write("engine", va, data)
            self.bytes_out += len(data)
            self.expected_out += len(data)
            staged_args[d.arg] = va
            call.in_slots.append((va, len(data)))
        for d in spec.marshal_out:
            cap = out_capacity(d, args)
            eng.app_check(args[d.arg], cap, "write")
            va = self.stage.alloc(max(cap, 1))
            staged_args[d.arg] = va
            call.out_slots.append((d, va, cap))
        eng.charge_copy(sum(len(b) for b in in_bytes))
        return call

    def execute_ocall(self, vt, call):
        eng = self.engine
        adv = eng.host.adversary

        def serve():
            return eng.host.serve(call.spec.number, call.staged_args, eng.public, vt.tid)

        raw = eng.ocall(vt, serve)
        if adv.mode == "toctou-stress":
            for _d, va, cap in call.out_slots:
                adv.mutate_public(eng.public, va, cap)
        return raw

    def copy_in_then_sanitize(self, call, raw):
        """Snapshot results into private memory, then check the snapshot."""
        eng = self.engine
        adv = eng.host.adversary
        snaps = []
        for d, va, cap in call.out_slots:
            n = min(max(raw, 0), cap) if d.length == "ret" else cap
            data = eng.machine.read("engine", va, n) if n else b""
            bounce = eng.bounce(data)
            snaps.append((d, bounce, len(data)))
            self.bytes_in += len(data)
        self._log("copy_in", call.callno)
        if adv.mode == "toctou-mutate":
            for _d, va, cap in call.out_slots:
                adv.mutate_public(eng.public, va, cap)
            for _va, n in call.in_slots:
                adv.mutate_public(eng.public, _va, n)
            for d, _va, _cap in call.out_slots:
                adv.attack_private(eng.machine, eng.actual(call.args[d.arg]))
        self._log("sanitize", call.callno)
        try:
            sanitize_scalar(call.spec, call.args, raw)
        except SanitizeReject as r:
            self.rejects.append((call.spec.name, r.reason))
            self.stage.release()
            return -EFAULT
        for d, bounce, n in snaps:
            if n:
                eng.app_write(call.args[d.arg], eng.machine.read("engine", bounce, n))
                self.expected_in += n
        eng.charge_copy(sum(n for _d, _b, n in snaps))
        self.stage.release()
        return raw

    def resume(self, callno):
        self._log("resume", callno)

    def delegate(self, vt, spec, args):
        """Full delegate path: marshal, OCALL, copy in, sanitize."""
        try:
            call = self.marshal_out(spec, args)
        except GuestFault:
            self.stage.release()
            return -EFAULT
        except MarshalTooLarge:
            self.stage.release()
            return -E2BIG
        raw = self.execute_ocall(vt, call)
        ret = self.copy_in_then_sanitize(call, raw)
        self.resume(call.callno)
        return ret
