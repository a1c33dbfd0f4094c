import pytest
from hypothesis import given, settings, strategies as st

from conftest import build, host
from ratelsim.abi import SIGSEGV
from ratelsim.errors import CacheTooSmall, InvalidConfig
from ratelsim.layout import CACHE_BASE, REGION_A
from ratelsim.oracle import interpret
from ratelsim.trace import diff_results
from ratelsim.translator import BasicBlock, CodeCache, Engine, RunConfig


def _engine(prog, **over):
    opts = dict(prog.options)
    opts.update(over)
    return Engine(prog.binary(), prog.host(), RunConfig(**opts), prog.script())


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(tcs=0), dict(quantum=0), dict(bb_max=0),
                                     dict(heap_max=1000), dict(stash_size=4097)])
    def test_validate(self, bad):
        with pytest.raises(InvalidConfig):
            RunConfig(**bad).validate()

    def test_defaults_are_valid(self):
        assert RunConfig().validate() is not None


class TestExecutionPath:
    @pytest.mark.parametrize("name", ["fib", "sort", "sigscript", "threads4", "stashcode"])
    def test_app_code_only_runs_from_the_cache(self, corpus, name):
        res = _engine(corpus[name]).run()
        assert res.stats["direct_fetches"] == 0
        assert res.stats["cache_fetches"] == res.stats["retired"]

    def test_block_length_cap(self, corpus):
        prog = corpus["primes"]
        eng = _engine(prog, max_bb_insts=2)
        built = []
        orig = eng.cache.insert

        def spy(blk):
            built.append(blk)
            orig(blk)

        eng.cache.insert = spy
        res = eng.run()
        o = interpret(prog.binary(), prog.host())
        assert diff_results(o, res) is None
        assert built and all(len(b.instrs) <= 2 for b in built)

    def test_traces_do_not_change_behavior(self, corpus):
        for name in ("fib", "collatz", "matmul"):
            prog = corpus[name]
            on = _engine(prog, hot_threshold=2).run()
            off = _engine(prog, traces_enabled=False).run()
            assert diff_results(on, off) is None
            assert off.stats["trace_peak"] == 0
        assert on.stats["trace_peak"] > 0

    def test_code_at_engine_addresses_is_relocated(self, corpus):
        prog = corpus["reloc"]
        eng = _engine(prog)
        res = eng.run()
        o = interpret(prog.binary(), prog.host())
        assert diff_results(o, res) is None
        assert eng.relocations
        for orig, actual, _size in eng.relocations:
            assert orig != actual


ISOLATION = """
.include "lib.s"
.code
_start:
    movi g1, {addr}
    ld g2, [g1+0]
    movi g1, 0
    movi g0, SYS_EXIT
    sys
"""


@pytest.mark.parametrize("addr", [REGION_A, REGION_A + 0x1000, CACHE_BASE])
def test_app_cannot_touch_engine_memory(addr):
    b = build(ISOLATION.format(addr=addr))
    o = interpret(b, host())
    eng = Engine(b, host())
    res = eng.run()
    assert diff_results(o, res) is None
    assert res.status == "signal" and res.exit_code == (128 + SIGSEGV) & 0xFF


def test_cache_too_small_is_reported(corpus):
    res = _engine(corpus["hello"], bb_max=8).run()
    assert res.status == "fault"
    assert res.reason.startswith("CacheTooSmall")


def test_patched_code_is_retranslated(corpus):
    prog = corpus["stashcode"]
    eng = _engine(prog)
    res = eng.run()
    assert diff_results(interpret(prog.binary(), prog.host()), res) is None
    assert eng.cache.invalidations >= 1


@settings(max_examples=60, deadline=None)
@given(st.integers(16, 256), st.lists(st.integers(1, 16), min_size=1, max_size=80))
def test_cache_never_exceeds_cap(cap_slots, sizes):
    cache = CodeCache(None, CACHE_BASE, 1 << 20, cap_slots * 8)
    for i, n in enumerate(sizes):
        blk = BasicBlock(0x400000 + 0x100 * i, [], "branch", 8 * n)
        if blk.size_bytes > cache.cap:
            with pytest.raises(CacheTooSmall):
                cache.insert(blk)
            continue
        cache.insert(blk)
        assert cache.bytes_used <= cap_slots * 8
        assert CACHE_BASE <= blk.cache_va and blk.cache_va + blk.size_bytes <= CACHE_BASE + cache.cap
    assert cache.bytes_peak <= cap_slots * 8
