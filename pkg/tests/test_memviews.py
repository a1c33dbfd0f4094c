import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from memoracle import fuzz, memory_engine
from ratelsim.abi import MAP_SHARED, MMAP_BASE, O_RDWR, PAGE, PROT_READ, PROT_WRITE
from ratelsim.errors import LayoutReject, StashExhausted, UnmappedFault
from ratelsim.host import VirtualFs
from ratelsim.programs import run_both
from ratelsim.trace import diff_results

RW = PROT_READ | PROT_WRITE


@pytest.fixture
def eng():
    return memory_engine()


def _anon(eng, lo, size, prot=RW):
    eng.machine.map_public(lo, size)
    return eng.mv.install_mmap(lo, size, prot, 0, -1, 0, False, False)


class TestLayoutCheck:
    @pytest.mark.parametrize("lo,size,reason", [
        (0, PAGE, "zero-page"),
        (MMAP_BASE + 8, PAGE, "unaligned"),
        (MMAP_BASE, 0, "unaligned"),
    ])
    def test_shape_errors(self, eng, lo, size, reason):
        with pytest.raises(LayoutReject) as e:
            eng.mv.layout_check(lo, size)
        assert e.value.reason == reason

    def test_engine_and_enclave_ranges(self, eng):
        lo, _hi = eng.layout.region_a
        with pytest.raises(LayoutReject) as e:
            eng.mv.layout_check(lo, PAGE)
        assert e.value.reason == "engine-overlap"
        with pytest.raises(LayoutReject) as e:
            eng.mv.layout_check(0x400000, PAGE)
        assert e.value.reason == "enclave-range"

    def test_overlap_and_missing_twin(self, eng):
        _anon(eng, MMAP_BASE, 2 * PAGE)
        with pytest.raises(LayoutReject) as e:
            eng.mv.layout_check(MMAP_BASE + PAGE, PAGE)
        assert e.value.reason == "overlap"
        with pytest.raises(LayoutReject) as e:
            eng.mv.install_mmap(MMAP_BASE + 8 * PAGE, PAGE, RW, 0, -1, 0, False, False)
        assert e.value.reason == "no-public-twin"
        eng.mv.layout_check(MMAP_BASE + 2 * PAGE, PAGE)


class TestFileMirror:
    SEED = b"abcdefghijklmnopqrstuvwxyz"

    def _mapped(self):
        eng = memory_engine()
        eng.host.vfs = VirtualFs({"/f": self.SEED})
        fd = eng.host.vfs.open("/f", O_RDWR)
        addr = eng.host._mmap(eng.public, 0, PAGE, RW, MAP_SHARED, fd, 0)
        eng.mv.install_mmap(addr, PAGE, RW, MAP_SHARED, fd, 0, True, True)
        return eng, addr

    def test_mirror_starts_as_file_bytes(self):
        eng, addr = self._mapped()
        assert eng.mv.read(addr, PAGE) == self.SEED + bytes(PAGE - len(self.SEED))
        rec = eng.mv.find(addr)
        assert rec.actual_va != addr and eng.machine.is_private(rec.actual_va)

    def test_private_writes_reach_the_file_only_through_sync(self):
        eng, addr = self._mapped()
        eng.mv.write(addr + 1, b"Z")
        assert eng.host.vfs.files["/f"][1:2] == b"b"
        assert eng.machine.read("host", addr + 1, 1) == b"b"
        assert eng.mv.sync_back(addr, addr + PAGE) == 1
        assert eng.machine.read("host", addr + 1, 1) == b"Z"
        assert eng.host._msync(eng.public, addr, PAGE) == 0
        assert bytes(eng.host.vfs.files["/f"]) == b"aZ" + self.SEED[2:]
        # syncing a clean mirror changes nothing
        eng.mv.sync_back(addr, addr + PAGE)
        eng.host._msync(eng.public, addr, PAGE)
        assert bytes(eng.host.vfs.files["/f"]) == b"aZ" + self.SEED[2:]

    def test_anonymous_mappings_never_sync(self, eng):
        _anon(eng, MMAP_BASE, PAGE)
        eng.mv.write(MMAP_BASE, b"q")
        assert eng.mv.sync_back() == 0
        assert eng.machine.read("host", MMAP_BASE, 1) == b"\0"

    def test_guest_program(self, corpus):
        o, res = run_both(corpus["mmap_file"])
        assert diff_results(o, res) is None
        assert b"msync=0" in res.stdout
        assert res.stats["sync_backs"] >= 1


class TestBrk:
    def test_grow_extends_one_record(self, eng):
        mv = eng.mv
        start = mv.heap_start
        assert mv.brk(start + PAGE) == start + PAGE
        assert mv.brk(start + 3 * PAGE + 5) == start + 3 * PAGE + 5
        heap = [r for r in mv.records if r.backing == "heap"]
        assert [(r.orig_va, r.length) for r in heap] == [(start, 4 * PAGE)]

    def test_out_of_range_returns_old_top(self, eng):
        mv = eng.mv
        top = mv.brk(mv.heap_start + PAGE)
        assert mv.brk(mv.heap_start + mv.heap_max + PAGE) == top
        assert mv.brk(mv.heap_start - PAGE) == top
        assert mv.brk(0) == top

    def test_shrink_then_regrow_is_zeroed(self, eng):
        mv = eng.mv
        start = mv.heap_start
        mv.brk(start + 2 * PAGE)
        mv.write(start + PAGE + 7, b"dirty")
        mv.brk(start + PAGE)
        with pytest.raises(UnmappedFault):
            mv.xlat(start + PAGE + 7)
        mv.brk(start + 2 * PAGE)
        assert mv.read(start + PAGE + 7, 5) == bytes(5)

    def test_reprotected_heap_is_not_extended(self, eng):
        mv = eng.mv
        start = mv.heap_start
        mv.brk(start + PAGE)
        mv.protect(start, start + PAGE, PROT_READ)
        mv.brk(start + 2 * PAGE)
        heap = sorted((r.orig_va, r.length) for r in mv.records if r.backing == "heap")
        assert heap == [(start, PAGE), (start + PAGE, PAGE)]


class TestProtect:
    def test_unmapped_range(self, eng):
        _anon(eng, MMAP_BASE, PAGE)
        before = eng.mv.snapshot()
        with pytest.raises(UnmappedFault):
            eng.mv.protect(MMAP_BASE, MMAP_BASE + 2 * PAGE, PROT_READ)
        assert eng.mv.snapshot() == before

    def test_relocation_keeps_contents_and_splits(self, eng):
        mv = eng.mv
        _anon(eng, MMAP_BASE, 3 * PAGE)
        mv.write(MMAP_BASE + PAGE + 9, b"keep")
        mv.protect(MMAP_BASE + PAGE, MMAP_BASE + 2 * PAGE, PROT_READ)
        assert [(lo, n, p) for lo, n, p in mv.snapshot() if lo >= MMAP_BASE] == [
            (MMAP_BASE, PAGE, RW), (MMAP_BASE + PAGE, PAGE, PROT_READ),
            (MMAP_BASE + 2 * PAGE, PAGE, RW)]
        assert mv.read(MMAP_BASE + PAGE + 9, 4) == b"keep"
        lo, hi = eng.layout.stash
        assert lo <= mv.xlat(MMAP_BASE + PAGE + 9) < hi
        assert mv.stats["relocations"] == 1

    def test_stash_exhaustion_is_all_or_nothing(self):
        eng = memory_engine(stash_count=1, stash_size=PAGE)
        _anon(eng, MMAP_BASE, 2 * PAGE)
        before = eng.mv.snapshot()
        with pytest.raises(StashExhausted):
            eng.mv.protect(MMAP_BASE, MMAP_BASE + 2 * PAGE, PROT_READ)
        assert eng.mv.snapshot() == before
        assert eng.mv.stats["relocations"] == 0


class TestRemove:
    def test_partial_unmap_splits_and_frees(self, eng):
        mv = eng.mv
        _anon(eng, MMAP_BASE, 3 * PAGE)
        mv.write(MMAP_BASE + PAGE, b"x")
        mv.remove(MMAP_BASE + PAGE, MMAP_BASE + 2 * PAGE)
        assert mv.find(MMAP_BASE + PAGE) is None
        assert mv.find(MMAP_BASE).length == PAGE
        assert mv.find(MMAP_BASE + 2 * PAGE).length == PAGE

    def test_metadata_lives_in_engine_region(self, eng):
        _anon(eng, MMAP_BASE, 2 * PAGE)
        eng.mv.protect(MMAP_BASE, MMAP_BASE + PAGE, PROT_READ)
        eng.mv.brk(eng.mv.heap_start + PAGE)
        lo, hi = eng.layout.region_a
        assert eng.mv.records
        for r in eng.mv.records:
            assert lo <= r.meta_va < hi
            assert eng.machine.is_private(r.meta_va)


@settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(0, 2**32))
def test_views_track_interval_oracle(seed):
    fuzz(seed, nops=150)
