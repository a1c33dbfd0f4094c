"""Observable behaviour of a run and its stable text report.

Both execution worlds produce an :class:`ObservableTrace`. Two traces are
equivalent when their serialized event lines match; the report wraps the
trace with per-run statistics and a digest over the trace lines only, so
the digest of an oracle run and of an enclave run agree when they behave
the same.
"""
import hashlib
import json
from dataclasses import dataclass, field

from .abi import SYS_GETTIME

REPORT_VERSION = 1
TIME_CLASS = frozenset((SYS_GETTIME,))


def digest_bytes(*parts):
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, int):
            p = p.to_bytes(8, "little", signed=p < 0)
        elif isinstance(p, str):
            p = p.encode()
        h.update(len(p).to_bytes(4, "little"))
        h.update(p)
    return h.hexdigest()[:16]


@dataclass
class ObservableTrace:
    events: list = field(default_factory=list)
    stdout: bytes = b""
    stderr: bytes = b""
    exit_code: int = None
    status: str = None
    retired: int = 0
    files: dict = field(default_factory=dict)

    def syscall(self, tid, nr, argdigest, ret):
        self.events.append(("sys", tid, nr, argdigest, ret))

    def signal(self, tid, signum, handler_pc, disposition):
        self.events.append(("sig", tid, signum, handler_pc, disposition))

    def lines(self, scope="trace"):
        """Serialized form; ``scope='output'`` keeps only streams and exit."""
        out = []
        if scope == "trace":
            for i, ev in enumerate(self.events):
                if ev[0] == "sys":
                    _, tid, nr, dg, ret = ev
                    shown = "*" if nr in TIME_CLASS else ret
                    out.append(f"event {i} sys tid={tid} nr={nr} args={dg} ret={shown}")
                else:
                    _, tid, signum, pc, disp = ev
                    out.append(f"event {i} sig tid={tid} signum={signum} handler={pc:#x} disp={disp}")
            out.append(f"retired {self.retired}")
        out.append(f"exit {self.exit_code} {self.status}")
        out.append(f"stdout {self.stdout.hex()}")
        out.append(f"stderr {self.stderr.hex()}")
        for path, dg in sorted(self.files.items()):
            out.append(f"file {path} {dg}")
        return out

    def digest(self, scope="trace"):
        return hashlib.sha256("\n".join(self.lines(scope)).encode()).hexdigest()


@dataclass
class RunResult:
    world: str
    trace: ObservableTrace
    reason: str = ""
    stats: dict = field(default_factory=dict)

    @property
    def exit_code(self):
        return self.trace.exit_code

    @property
    def status(self):
        return self.trace.status

    @property
    def stdout(self):
        return self.trace.stdout

    def cli_status(self):
        st = self.trace.status
        if st == "exit":
            return 0 if self.trace.exit_code == 0 else 1
        if st == "abort":
            return 3
        if st == "config":
            return 4
        return 2

    def report_lines(self):
        out = [f"ratel-report {REPORT_VERSION}", f"world {self.world}",
               f"reason {self.reason or '-'}"]
        out += self.trace.lines()
        for k in sorted(self.stats):
            v = self.stats[k]
            if isinstance(v, dict):
                v = ",".join(f"{a}:{b}" for a, b in sorted(v.items())) or "-"
            out.append(f"stat {k} {v}")
        out.append(f"digest {self.trace.digest()}")
        return out

    def report_text(self):
        return "\n".join(self.report_lines()) + "\n"

    def to_json(self):
        t = self.trace
        return json.dumps({
            "version": REPORT_VERSION, "world": self.world, "reason": self.reason,
            "exit_code": t.exit_code, "status": t.status, "retired": t.retired,
            "events": [list(e) for e in t.events], "stdout": t.stdout.hex(),
            "stderr": t.stderr.hex(), "files": t.files, "stats": self.stats,
            "digest": t.digest()}, sort_keys=True, indent=1)


def parse_report(text):
    """Split a text report into (trace lines, stat lines)."""
    trace, stats = [], []
    for line in text.splitlines():
        key = line.split(" ", 1)[0]
        if key in ("event", "retired", "exit", "stdout", "stderr", "file"):
            trace.append(line)
        elif key == "stat":
            stats.append(line)
    return trace, stats


_OUTPUT_KEYS = ("exit", "stdout", "stderr", "file")


def diff_lines(a, b, scope="trace"):
    """Return None when equal, else (index, line_a, line_b) of the first divergence."""
    if scope == "output":
        a = [x for x in a if x.split(" ", 1)[0] in _OUTPUT_KEYS]
        b = [x for x in b if x.split(" ", 1)[0] in _OUTPUT_KEYS]
    for i in range(max(len(a), len(b))):
        la = a[i] if i < len(a) else "<end>"
        lb = b[i] if i < len(b) else "<end>"
        if la != lb:
            return i, la, lb
    return None


def diff_results(ra, rb, scope="trace"):
    return diff_lines(ra.trace.lines(), rb.trace.lines(), scope)
