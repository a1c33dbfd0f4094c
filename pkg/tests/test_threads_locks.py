from types import SimpleNamespace

import pytest

from conftest import small_machine
from memoracle import memory_engine
from ratelsim.abi import (EAGAIN, EFAULT, EINVAL, EPERM, FUTEX_LOCK, FUTEX_UNLOCK, FUTEX_WAIT,
                          FUTEX_WAKE, MMAP_BASE, PAGE, PROT_READ, PROT_WRITE)
from ratelsim.errors import InvalidConfig, RatelError
from ratelsim.host import AdversaryPolicy
from ratelsim.isa import GuestContext
from ratelsim.locks import BLOCK, LockManager, insecure_baseline_demo
from ratelsim.programs import run_both
from ratelsim.threads import TcsManager, TlsList, VThread
from ratelsim.trace import diff_results
from ratelsim.translator import Engine, RunConfig


def _vt(tid):
    return VThread(tid, GuestContext())


class TestTcsManager:
    def test_fifo_handoff_and_peak(self):
        tm = TcsManager(2)
        a, b, c, d = (_vt(t) for t in (1, 2, 3, 4))
        assert tm.acquire(a) == 0
        assert tm.acquire(b) == 1
        assert tm.acquire(c) is None
        assert tm.acquire(d) is None
        assert tm.release(1) == (c, 1)
        assert tm.release(0) == (d, 0)
        assert tm.release(1) is None
        assert tm.occupied == 1
        assert tm.peak == 2
        assert [tid for tid, _s in tm.grants] == [1, 2, 3, 4]

    def test_blocked_children_run_once_a_slot_frees(self, corpus):
        prog = corpus["threads4"]
        o, res = run_both(prog, tcs=2)
        assert diff_results(o, res, scope="output") is None
        assert res.stats["tcs_peak"] <= 2


class TestTlsList:
    def test_primary_is_permanent(self):
        m = small_machine()
        m.eenter(0)
        tls = TlsList(m, [0x11000 + 64 * i for i in range(3)])
        assert tls.owners() == ["sgx-primary"]
        tls.push("engine")
        tls.push("app", 5, 6)
        assert tls.owners() == ["sgx-primary", "engine", "app"]
        assert tls.restore() == ("app", 5, 6)
        tls.pop()
        tls.pop()
        with pytest.raises(RatelError):
            tls.pop()

    def test_every_thread_enters_with_three_segments(self, corpus, monkeypatch):
        seen = {}
        orig = Engine._first_entry

        def spy(self, vt):
            orig(self, vt)
            seen[vt.tid] = (vt.tls.owners(), vt.tls.restore()[1:])

        monkeypatch.setattr(Engine, "_first_entry", spy)
        prog = corpus["tls"]
        res = Engine(prog.binary(), prog.host(), RunConfig(**prog.options)).run()
        assert res.status == "exit"
        assert len(seen) == 2
        for owners, _bases in seen.values():
            assert owners == ["sgx-primary", "engine", "app"]
        # the child inherits the parent's bases at clone time
        child = max(seen)
        assert seen[child][1] == (0x1111, 0x2222)


class TestThreadLifecycle:
    def test_exit_clears_ctid_and_join_returns(self, corpus):
        o, res = run_both(corpus["clone_join"])
        assert diff_results(o, res) is None
        assert res.status == "exit" and res.exit_code == 0

    def test_exit_group_ends_spinning_threads(self, corpus):
        o, res = run_both(corpus["exit_group"])
        assert diff_results(o, res) is None
        assert res.exit_code == 42 and res.stdout == b"bye!\n"


def _manager(mode="manager", harness=False):
    eng = memory_engine()
    eng.mv.brk(eng.mv.heap_start + PAGE)
    woken = []
    shim = SimpleNamespace(machine=eng.machine, mv=eng.mv, slab=eng.slab, host=eng.host,
                           wake_thread=woken.append)
    return eng, LockManager(shim, mode, harness), woken


class TestFutex:
    def test_wait_wake_in_fifo_order(self):
        eng, lm, woken = _manager()
        word = eng.mv.heap_start
        eexits = eng.machine.stats["eexit"]
        assert lm.futex(_vt(1), word, FUTEX_WAIT, 1) == -EAGAIN
        waiters = [_vt(t) for t in (2, 3, 4)]
        for vt in waiters:
            assert lm.futex(vt, word, FUTEX_WAIT, 0) == (BLOCK, 0)
        assert lm.futex(_vt(1), word, FUTEX_WAKE, 2) == 2
        assert woken == waiters[:2]
        assert lm.futex(_vt(1), word, FUTEX_WAKE, 5) == 1
        assert lm.stats["eagain"] == 1 and lm.stats["blocked"] == 3
        # served entirely inside the enclave
        assert eng.machine.stats["eexit"] == eexits

    def test_mutex_handoff_and_ownership(self):
        eng, lm, woken = _manager()
        word = eng.mv.heap_start + 8
        a, b = _vt(1), _vt(2)
        assert lm.futex(a, word, FUTEX_LOCK, 0) == 0
        assert eng.mv.load(word, 8) == 1
        assert lm.futex(b, word, FUTEX_LOCK, 0) == (BLOCK, 0)
        assert eng.mv.load(word, 8) == 2
        assert lm.futex(b, word, FUTEX_UNLOCK, 0) == -EPERM
        assert lm.futex(a, word, FUTEX_UNLOCK, 0) == 0
        assert woken == [b]
        assert lm.locks[word].owner == 2
        assert lm.futex(b, word, FUTEX_UNLOCK, 0) == 0
        assert eng.mv.load(word, 8) == 0
        assert lm.max_in_section == 1

    def test_bad_words_and_ops(self):
        eng, lm, _w = _manager()
        assert lm.futex(_vt(1), 0x7000000, FUTEX_WAIT, 0) == -EFAULT
        eng.machine.map_public(MMAP_BASE, PAGE)
        eng.mv.install_mmap(MMAP_BASE, PAGE, PROT_READ, 0, -1, 0, False, False)
        assert lm.futex(_vt(1), MMAP_BASE, FUTEX_WAIT, 0) == -EFAULT
        assert lm.futex(_vt(1), eng.mv.heap_start, 77, 0) == -EINVAL

    def test_lock_metadata_stays_in_engine_region(self):
        eng, lm, _w = _manager()
        lm.futex(_vt(1), eng.mv.heap_start, FUTEX_LOCK, 0)
        lo, hi = eng.layout.region_a
        obj = lm.locks[eng.mv.heap_start]
        assert lo <= obj.meta_va < hi and lo <= lm.guard_va < hi


class TestInsecureFoils:
    @pytest.mark.parametrize("mode", ["insecure-public-futex", "insecure-two-copy"])
    def test_only_the_harness_can_build_them(self, mode):
        eng = memory_engine()
        with pytest.raises(InvalidConfig):
            LockManager(eng, mode)
        with pytest.raises(InvalidConfig):
            LockManager(eng, "spin-forever", True)
        _e, lm, _w = _manager(mode, harness=True)
        assert lm.mode == mode

    def test_two_copy_word_diverges_under_flips(self, corpus):
        reports = [insecure_baseline_demo("insecure-two-copy", corpus["counter"].binary(),
                                          seed=s, quantum=16, expected=2000) for s in range(5)]
        assert any(r.divergences > 0 for r in reports)

    def test_manager_word_resists_flips(self, corpus):
        o, res = run_both(corpus["counter"], lambda: AdversaryPolicy("lockword-flip"))
        assert diff_results(o, res) is None
        assert b"counter=2000" in res.stdout
        assert res.stats["adversary"]["private_denied"] > 0
        assert res.stats["host_private_denied"] == res.stats["adversary"]["private_denied"]


def test_lock_state_survives_relocation():
    eng, lm, _w = _manager()
    word = eng.mv.heap_start
    lm.futex(_vt(1), word, FUTEX_LOCK, 0)
    eng.mv.protect(word, word + PAGE, PROT_READ | PROT_WRITE)
    # relocation moved the word; ownership follows it
    assert lm.locks[word].owner == 1
    assert lm.futex(_vt(2), word, FUTEX_UNLOCK, 0) == -EPERM
    assert lm.futex(_vt(1), word, FUTEX_UNLOCK, 0) == 0
    assert lm.locks[word].actual == eng.mv.xlat(word, "write")
    assert eng.mv.load(word, 8) == 0
