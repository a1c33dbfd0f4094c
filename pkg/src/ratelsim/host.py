"""The untrusted world: virtual filesystem, clock, OS syscall service,
scripted event injection and the adversary.

The host only ever touches memory through the ``mem`` object handed to
:meth:`Host.serve`. In the enclave world that object is a window onto
public memory, so every address the host dereferences is public by
construction; the direct interpreter hands it flat process memory instead.
"""
import hashlib
import os
import re
from dataclasses import dataclass, field

from .abi import (CPU_ID, E2BIG, EBADF, EEXIST, EFAULT, EINVAL, EMFILE, ENOENT,
                  ENOMEM, MAIN_TID, MAP_ANON, MAP_FIXED, MAP_PRIVATE, MAP_SHARED,
                  MMAP_BASE, MMAP_LIMIT, O_ACCMODE, O_APPEND, O_CREAT, O_RDONLY,
                  O_TRUNC, O_WRONLY, PAGE, PID, SIGNALS, SYS_CLONE,
                  SYS_CLOSE, SYS_EXIT, SYS_EXIT_GROUP, SYS_FSYNC, SYS_GETPID,
                  SYS_GETTIME, SYS_MMAP, SYS_MPROTECT, SYS_MSYNC, SYS_MUNMAP,
                  SYS_OPEN, SYS_READ, SYS_WRITE, page_up)
from .errors import AccessFault, RatelError, ScriptError

MAX_FDS = 64
MAX_PATH = 4096


# -- filesystem -------------------------------------------------------------

@dataclass
class OpenFile:
    path: str
    flags: int
    cursor: int = 0


class VirtualFs:
    """Path to bytes map plus an fd table; fds 0/1/2 are the std streams."""

    def __init__(self, files=None, stdin=b""):
        self.files = {p: bytearray(v) for p, v in (files or {}).items()}
        self.stdin = bytes(stdin)
        self.stdin_pos = 0
        self.stdout = bytearray()
        self.stderr = bytearray()
        self.fds = {0: OpenFile("<stdin>", O_RDONLY), 1: OpenFile("<stdout>", O_WRONLY),
                    2: OpenFile("<stderr>", O_WRONLY)}

    @classmethod
    def from_dir(cls, root, stdin=b""):
        files = {}
        for base, _dirs, names in os.walk(root):
            for name in sorted(names):
                full = os.path.join(base, name)
                rel = "/" + os.path.relpath(full, root).replace(os.sep, "/")
                with open(full, "rb") as f:
                    files[rel] = f.read()
        return cls(files, stdin)

    @classmethod
    def from_manifest(cls, path, stdin=b""):
        """Lines of ``path=hexbytes``; blank lines and ``#`` comments ignored."""
        files = {}
        with open(path) as f:
            for n, line in enumerate(f, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                name, sep, hexdata = line.partition("=")
                if not sep:
                    raise ScriptError(f"manifest line {n}: expected path=hex")
                files[name.strip()] = bytes.fromhex(hexdata.strip())
        return cls(files, stdin)

    def copy(self):
        return VirtualFs({p: bytes(v) for p, v in self.files.items()}, self.stdin)

    def open(self, path, flags):
        if len(self.fds) >= MAX_FDS:
            return -EMFILE
        if path not in self.files:
            if not flags & O_CREAT:
                return -ENOENT
            self.files[path] = bytearray()
        elif flags & O_TRUNC and flags & O_ACCMODE != O_RDONLY:
            del self.files[path][:]
        fd = 3
        while fd in self.fds:
            fd += 1
        self.fds[fd] = OpenFile(path, flags)
        return fd

    def close(self, fd):
        if self.fds.pop(fd, None) is None:
            return -EBADF
        return 0

    def read(self, fd, n):
        of = self.fds.get(fd)
        if of is None or of.flags & O_ACCMODE == O_WRONLY:
            return -EBADF
        if fd == 0:
            out = self.stdin[self.stdin_pos:self.stdin_pos + n]
            self.stdin_pos += len(out)
            return out
        data = self.files.get(of.path)
        if data is None:
            return -EBADF
        out = bytes(data[of.cursor:of.cursor + n])
        of.cursor += len(out)
        return out

    def write(self, fd, data):
        of = self.fds.get(fd)
        if of is None or of.flags & O_ACCMODE == O_RDONLY:
            return -EBADF
        if fd == 1:
            self.stdout += data
            return len(data)
        if fd == 2:
            self.stderr += data
            return len(data)
        buf = self.files[of.path]
        if of.flags & O_APPEND:
            of.cursor = len(buf)
        if of.cursor > len(buf):
            buf.extend(bytes(of.cursor - len(buf)))
        buf[of.cursor:of.cursor + len(data)] = data
        of.cursor += len(data)
        return len(data)

    def path_of(self, fd):
        of = self.fds.get(fd)
        if of is None or fd < 3:
            return None
        return of.path

    def digests(self):
        return {p: hashlib.sha256(bytes(v)).hexdigest()[:32] for p, v in sorted(self.files.items())}


class VirtualClock:
    def __init__(self):
        self.now = 0

    def tick(self, n=1):
        self.now += n
        return self.now


# -- event script -----------------------------------------------------------

@dataclass
class Trigger:
    at: int
    thread: object  # tid or None for "any"
    action: str     # "signal" or "adversary"
    arg: object
    line: int = 0
    fired: bool = False


_LINE = re.compile(r"thread:(\S+)\s+at:(\S+)\s+do:(\S+)\s+(\S+)\s*$")


class EventScript:
    """Ordered list of triggers, each firing at most once."""

    def __init__(self, triggers=()):
        self.triggers = sorted(triggers, key=lambda t: (t.at, t.line))
        self.pos = 0

    @classmethod
    def parse(cls, text):
        out = []
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            m = _LINE.match(line)
            if not m:
                raise ScriptError(f"script line {n}: cannot parse {raw!r}")
            who, at, verb, arg = m.groups()
            try:
                count = int(at, 0)
                thread = None if who == "any" else int(who, 0)
            except ValueError:
                raise ScriptError(f"script line {n}: bad number") from None
            if count < 0:
                raise ScriptError(f"script line {n}: negative trigger")
            if verb == "signal":
                name = arg.upper().removeprefix("SIG")
                if name not in SIGNALS:
                    raise ScriptError(f"script line {n}: unknown signal {arg}")
                out.append(Trigger(count, thread, "signal", SIGNALS[name], n))
            elif verb == "adversary":
                if arg not in ADVERSARY_MODES:
                    raise ScriptError(f"script line {n}: unknown adversary op {arg}")
                out.append(Trigger(count, thread, "adversary", arg, n))
            else:
                raise ScriptError(f"script line {n}: unknown action {verb}")
        return cls(out)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.parse(f.read())

    def fresh(self):
        return EventScript([Trigger(t.at, t.thread, t.action, t.arg, t.line) for t in self.triggers])

    def next_at(self):
        return self.triggers[self.pos].at if self.pos < len(self.triggers) else None

    def due(self, retired):
        """Pop every trigger whose count equals ``retired`` (or was passed)."""
        out = []
        while self.pos < len(self.triggers) and self.triggers[self.pos].at <= retired:
            t = self.triggers[self.pos]
            t.fired = True
            out.append(t)
            self.pos += 1
        return out


# -- adversary --------------------------------------------------------------

ADVERSARY_MODES = ("off", "toctou-mutate", "toctou-stress", "iago-return",
                   "lockword-flip", "clone-arg-mutate")
IAGO_VARIANTS = ("zero", "engine", "overlap", "unaligned")


@dataclass
class AdversaryPolicy:
    mode: str = "off"
    iago_variant: str = None
    engine_va: int = 0
    stats: dict = field(default_factory=lambda: {
        "mutations": 0, "iago": 0, "private_attempts": 0,
        "private_denied": 0, "private_success": 0, "lock_flips": 0})

    def __post_init__(self):
        if self.mode not in ADVERSARY_MODES:
            raise RatelError(f"unknown adversary mode {self.mode!r}")

    def mutate_public(self, mem, va, n):
        """Flip every byte of a public buffer."""
        if n <= 0:
            return
        data = mem.read(va, n)
        mem.write(va, bytes(b ^ 0xA5 for b in data))
        self.stats["mutations"] += 1

    def attack_private(self, machine, va):
        """Try to scribble on private memory; the machine must refuse."""
        self.stats["private_attempts"] += 1
        try:
            machine.write("host", va, b"\xff" * 8)
        except AccessFault:
            self.stats["private_denied"] += 1
            return False
        self.stats["private_success"] += 1
        return True

    def iago(self, nr, args, ret, host):
        """Return a malicious result for ``nr`` (or ``ret`` unchanged)."""
        if self.mode != "iago-return":
            return ret
        self.stats["iago"] += 1
        if nr in (SYS_READ, SYS_WRITE):
            return args[2] + 9
        if nr == SYS_MMAP:
            variant = self.iago_variant or IAGO_VARIANTS[(self.stats["iago"] - 1) % len(IAGO_VARIANTS)]
            if variant == "zero":
                return 0
            if variant == "engine":
                return self.engine_va
            if variant == "unaligned":
                return (ret + 8) if ret >= 0 else MMAP_BASE + 8
            others = sorted(a for a in host.mappings if a != ret)
            return others[0] if others else ret + 0x10  # overlap or unaligned fallback
        return -5000


# -- the OS -----------------------------------------------------------------

@dataclass
class HostMapping:
    addr: int
    size: int
    prot: int
    flags: int
    path: str = None
    offset: int = 0

    @property
    def end(self):
        return self.addr + self.size

    @property
    def shared_file(self):
        return self.path is not None and self.flags & MAP_SHARED


class Host:
    """Serves syscalls against a memory window.

    ``mem`` must provide ``read(va, n)``, ``write(va, data)``,
    ``map(va, size, prot)``, ``unmap(va, size)`` and ``protect(va, size, prot)``.
    """

    def __init__(self, vfs=None, adversary=None):
        self.vfs = vfs or VirtualFs()
        self.clock = VirtualClock()
        self.adversary = adversary or AdversaryPolicy()
        self.mappings = {}
        self.threads = {MAIN_TID}
        self.next_tid = MAIN_TID + 1
        self.served = 0
        self.touched = []
        self.exited = False

    def _read(self, mem, va, n):
        self.touched.append(va)
        return mem.read(va, n)

    def _write(self, mem, va, data):
        self.touched.append(va)
        mem.write(va, data)

    def read_cstr(self, mem, va):
        out = bytearray()
        while len(out) < MAX_PATH:
            chunk = self._read(mem, va + len(out), 1)
            if chunk == b"\0":
                return out.decode("latin-1")
            out += chunk
        return None

    def serve(self, nr, args, mem, tid=MAIN_TID):
        self.served += 1
        ret = self._dispatch(nr, list(args) + [0] * (6 - len(args)), mem, tid)
        return self.adversary.iago(nr, args, ret, self)

    def serve_insn(self, name):
        """Service for instructions that are illegal in enclave mode."""
        self.served += 1
        if name == "rdtime":
            return self.clock.now
        return CPU_ID

    def _dispatch(self, nr, a, mem, tid):
        vfs = self.vfs
        if nr == SYS_READ:
            data = vfs.read(a[0], a[2])
            if isinstance(data, int):
                return data
            if data:
                self._write(mem, a[1], data)
            return len(data)
        if nr == SYS_WRITE:
            if a[2] > 1 << 20:
                return -E2BIG
            return vfs.write(a[0], self._read(mem, a[1], a[2]) if a[2] else b"")
        if nr == SYS_OPEN:
            path = self.read_cstr(mem, a[0])
            if path is None:
                return -EFAULT
            return vfs.open(path, a[1])
        if nr == SYS_CLOSE:
            return vfs.close(a[0])
        if nr == SYS_FSYNC:
            path = vfs.path_of(a[0])
            if path is None:
                return -EBADF
            for m in self._ordered():
                if m.shared_file and m.path == path:
                    self._flush(mem, m, m.addr, m.end)
            return 0
        if nr == SYS_GETTIME:
            return self.clock.tick()
        if nr == SYS_GETPID:
            return PID
        if nr == SYS_MMAP:
            return self._mmap(mem, *a)
        if nr == SYS_MUNMAP:
            return self._munmap(mem, a[0], a[1])
        if nr == SYS_MSYNC:
            return self._msync(mem, a[0], a[1])
        if nr == SYS_MPROTECT:
            return self._mprotect(mem, a[0], a[1], a[2])
        if nr == SYS_CLONE:
            new = self.next_tid
            self.next_tid += 1
            self.threads.add(new)
            return new
        if nr == SYS_EXIT:
            self.threads.discard(tid)
            if not self.threads:
                self.process_exit(mem)
            return 0
        if nr == SYS_EXIT_GROUP:
            self.threads.clear()
            self.process_exit(mem)
            return 0
        return -EINVAL

    # -- memory mappings --------------------------------------------------
    def _ordered(self):
        return [self.mappings[a] for a in sorted(self.mappings)]

    def _overlaps(self, lo, hi):
        return [m for m in self._ordered() if m.addr < hi and lo < m.end]

    def find_free(self, size):
        cur = MMAP_BASE
        for m in self._ordered():
            if m.addr - cur >= size:
                break
            cur = max(cur, m.end)
        return cur if cur + size <= MMAP_LIMIT else None

    def _mmap(self, mem, addr, length, prot, flags, fd, offset):
        if length <= 0 or length > MMAP_LIMIT - MMAP_BASE or offset % PAGE:
            return -EINVAL
        if bool(flags & MAP_SHARED) == bool(flags & MAP_PRIVATE):
            return -EINVAL
        path = None
        if not flags & MAP_ANON:
            path = self.vfs.path_of(fd)
            if path is None:
                return -EBADF
        size = page_up(length)
        if flags & MAP_FIXED:
            if addr % PAGE or addr < MMAP_BASE or addr + size > MMAP_LIMIT:
                return -EINVAL
            if self._overlaps(addr, addr + size):
                return -EEXIST
        else:
            addr = self.find_free(size)
            if addr is None:
                return -ENOMEM
        mem.map(addr, size, prot)
        self.touched.append(addr)
        if path is not None:
            content = bytes(self.vfs.files[path][offset:offset + size])
            if content:
                self._write(mem, addr, content)
        self.mappings[addr] = HostMapping(addr, size, prot, flags, path, offset)
        return addr

    def _flush(self, mem, m, lo, hi):
        """Write the [lo, hi) part of a shared file mapping back to its file."""
        buf = self.vfs.files.get(m.path)
        if buf is None:
            return
        file_lo = m.offset + (lo - m.addr)
        n = min(hi - lo, len(buf) - file_lo)
        if n > 0:
            buf[file_lo:file_lo + n] = self._read(mem, lo, n)

    def _munmap(self, mem, addr, length):
        if addr % PAGE or length <= 0:
            return -EINVAL
        lo, hi = addr, addr + page_up(length)
        for m in self._overlaps(lo, hi):
            clo, chi = max(lo, m.addr), min(hi, m.end)
            if m.shared_file:
                self._flush(mem, m, clo, chi)
            del self.mappings[m.addr]
            if m.addr < clo:
                self.mappings[m.addr] = HostMapping(m.addr, clo - m.addr, m.prot, m.flags, m.path, m.offset)
            if chi < m.end:
                self.mappings[chi] = HostMapping(chi, m.end - chi, m.prot, m.flags, m.path,
                                                 m.offset + (chi - m.addr))
            mem.unmap(clo, chi - clo)
        return 0

    def _covered(self, lo, hi):
        cur = lo
        for m in self._overlaps(lo, hi):
            if m.addr > cur:
                return False
            cur = max(cur, m.end)
        return cur >= hi

    def _msync(self, mem, addr, length):
        if addr % PAGE or length < 0:
            return -EINVAL
        lo, hi = addr, addr + page_up(length)
        if not self._covered(lo, hi):
            return -ENOMEM
        for m in self._overlaps(lo, hi):
            if m.shared_file:
                self._flush(mem, m, max(lo, m.addr), min(hi, m.end))
        return 0

    def _mprotect(self, mem, addr, length, prot):
        lo, hi = addr, addr + page_up(length)
        if not self._covered(lo, hi):
            return -ENOMEM
        for m in self._overlaps(lo, hi):
            clo, chi = max(lo, m.addr), min(hi, m.end)
            del self.mappings[m.addr]
            if m.addr < clo:
                self.mappings[m.addr] = HostMapping(m.addr, clo - m.addr, m.prot, m.flags, m.path, m.offset)
            self.mappings[clo] = HostMapping(clo, chi - clo, prot, m.flags, m.path,
                                             m.offset + (clo - m.addr) if m.path else 0)
            if chi < m.end:
                self.mappings[chi] = HostMapping(chi, m.end - chi, m.prot, m.flags, m.path,
                                                 m.offset + (chi - m.addr) if m.path else 0)
            mem.protect(clo, chi - clo, prot)
        return 0

    def process_exit(self, mem):
        if self.exited:
            return
        self.exited = True
        for m in self._ordered():
            if m.shared_file:
                self._flush(mem, m, m.addr, m.end)
