import pytest

from conftest import build, host
from ratelsim.abi import E2BIG, EFAULT, ENOSYS, MAX_ERRNO
from ratelsim.errors import RatelError, SanitizeReject
from ratelsim.gateway import (BY_NAME, TABLE, classify, dump_table, parse_table,
                              sanitize_scalar, table_text)
from ratelsim.host import AdversaryPolicy, Host
from ratelsim.layout import STAGING_BASE
from ratelsim.oracle import interpret
from ratelsim.programs import run_both
from ratelsim.trace import diff_results
from ratelsim.translator import Engine, RunConfig

PROBE = """
.include "lib.s"
.code
_start:
    # oversized write
    movi g1, 1
    movi g2, msg
    movi g3, 0x200000
    movi g0, SYS_WRITE
    sys
    movi g9, rets
    st g0, [g9+0]
    # unmapped source buffer
    movi g1, 1
    movi g2, 0x5000000
    movi g3, 4
    movi g0, SYS_WRITE
    sys
    st g0, [g9+8]
    # read into a read-only code page
    movi g1, 0
    movi g2, _start
    movi g3, 4
    movi g0, SYS_READ
    sys
    st g0, [g9+16]
    # unknown syscall number
    movi g0, 999
    sys
    st g0, [g9+24]
    movi g1, msg
    movi g2, 3
    call print_str
    movi g1, 0
    movi g0, SYS_EXIT
    sys
.data
msg: .ascii "ok\\n"
rets: .zero 32
"""


def _ret(res, idx):
    sys_events = [e for e in res.trace.events if e[0] == "sys"]
    return sys_events[idx][4]


class TestTable:
    def test_every_row_parses(self):
        assert parse_table(table_text()) == TABLE
        assert {"read", "write", "mmap", "clone", "futex", "archctl"} <= set(BY_NAME)
        assert classify(999) is None
        assert "archctl" in dump_table()

    def test_malformed_rows(self):
        row = "0 read delegate file 3 always - - none -\n"
        with pytest.raises(RatelError):
            parse_table(row + row)
        with pytest.raises(RatelError):
            parse_table("0 read sometimes file 3 always - - none -\n")
        with pytest.raises(RatelError):
            parse_table("0 read delegate file 3 always a1:deep:a2 - none -\n")

    def test_descriptors(self):
        d = BY_NAME["read"].marshal_out[0]
        assert (d.arg, d.length, d.n) == (1, "ret", 2)
        assert str(d) == "a1:buffer:ret/a2"
        assert BY_NAME["clone"].marshal_in[0].depth == "record"


class TestSanitize:
    def test_errno_range(self):
        spec = BY_NAME["close"]
        assert sanitize_scalar(spec, [3], -EFAULT) is None
        with pytest.raises(SanitizeReject):
            sanitize_scalar(spec, [3], -(MAX_ERRNO + 1))

    def test_length_bound(self):
        spec = BY_NAME["read"]
        sanitize_scalar(spec, [0, 0x1000, 16], 16)
        with pytest.raises(SanitizeReject):
            sanitize_scalar(spec, [0, 0x1000, 16], 17)


def test_argument_errors_match_direct_execution():
    b = build(PROBE)
    oracle = interpret(b, host(stdin=b"abcd"))
    eng = Engine(b, host(stdin=b"abcd"))
    res = eng.run()
    assert diff_results(oracle, res) is None
    assert [_ret(res, i) for i in range(4)] == [-E2BIG, -EFAULT, -EFAULT, -ENOSYS]
    assert res.stdout == b"ok\n"
    # none of the rejected calls left the enclave
    assert eng.host.vfs.stdin_pos == 0
    assert res.stats["syscalls"]["unsupported"] == 1


class RecordingHost(Host):
    """Checks the staging arena between calls and logs every address served."""

    def __init__(self, machine_ref, **kw):
        super().__init__(**kw)
        self.machine_ref = machine_ref
        self.dirty = []

    def serve(self, nr, args, mem, tid=1000):
        eng = self.machine_ref[0]
        used = eng.stage.used
        tail = eng.machine.read("engine", STAGING_BASE + used, 4096)
        if any(tail):
            self.dirty.append(nr)
        return super().serve(nr, args, mem, tid)


def _recorded(prog):
    ref = []
    h = RecordingHost(ref, vfs=prog.host().vfs)
    eng = Engine(prog.binary(), h, RunConfig(**prog.options), prog.script())
    ref.append(eng)
    res = eng.run()
    return eng, h, res


class TestTwoCopyProtocol:
    def test_copy_in_precedes_sanitize_precedes_resume(self, corpus):
        eng, _h, _res = _recorded(corpus["fileio"])
        per_call = {}
        for kind, no in eng.gateway.events:
            per_call.setdefault(no, []).append(kind)
        assert per_call
        for kinds in per_call.values():
            assert kinds == ["copy_in", "sanitize", "resume"]

    @pytest.mark.parametrize("name", ["fileio", "echo_stdin", "mmap_file", "threads4", "sigthreads"])
    def test_staging_is_wiped_between_calls(self, corpus, name):
        eng, h, _res = _recorded(corpus[name])
        assert h.dirty == []
        assert eng.stage.is_zero()
        assert eng.stage.used == 0

    def test_bytes_are_conserved(self, corpus):
        for name in ("hello", "fileio", "echo_stdin", "strings"):
            eng, _h, res = _recorded(corpus[name])
            gw = eng.gateway
            assert gw.bytes_out == gw.expected_out
            assert gw.expected_in <= gw.bytes_in
        eng, _h, res = _recorded(corpus["hello"])
        assert eng.gateway.bytes_out == len(res.stdout)

    def test_host_only_sees_public_addresses(self, corpus):
        for prog in corpus.values():
            eng, h, _res = _recorded(prog)
            private = [va for va in h.touched if eng.machine.is_private(va)]
            assert private == [], prog.name

    def test_every_host_service_is_an_ocall(self, corpus):
        for prog in corpus.values():
            _o, res = run_both(prog)
            assert res.stats["host_served"] == res.stats["ocalls"], prog.name

    def test_stress_mutation_is_seen_once_and_consistently(self, corpus):
        prog = corpus["echo_stdin"]
        _o, res = run_both(prog, lambda: AdversaryPolicy("toctou-stress"))
        n = len(prog.stdin)
        flipped = bytes(b ^ 0xA5 for b in prog.stdin)
        assert res.stdout[:n] == flipped
        assert res.stdout[n:] == f"bytes={n}\n".encode()

    def test_post_copy_mutation_is_invisible(self, corpus):
        for name in ("echo_stdin", "fileio", "mmap_file", "clone_join"):
            o, res = run_both(corpus[name], lambda: AdversaryPolicy("toctou-mutate"))
            assert diff_results(o, res) is None
            assert res.stats["adversary"]["mutations"] > 0

    def test_clone_arguments_are_compared(self, corpus):
        o, res = run_both(corpus["clone_join"], lambda: AdversaryPolicy("clone-arg-mutate"))
        assert res.stats["sanitize_rejects"] >= 1
        assert diff_results(o, res) is not None

