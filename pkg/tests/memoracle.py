"""Independent procmap oracle and the random mmap/mprotect/munmap/brk driver."""
import random

import pytest

from conftest import build, host
from ratelsim.abi import MMAP_BASE, PAGE, PROT_READ, PROT_WRITE, page_up
from ratelsim.errors import LayoutReject, SoftPermFault, UnmappedFault
from ratelsim.memviews import ACCESS_BIT
from ratelsim.translator import Engine, RunConfig


class IntervalOracle:
    """Reference procmap: disjoint [lo, hi) intervals with logical perms.

    Records split at range edges and are never merged, except that growing
    the heap extends the last heap interval when it was never re-permissioned.
    Page contents are tracked so relocation and zero-on-reuse can be checked.
    """

    def __init__(self, heap_start, heap_max):
        self.iv = []          # [lo, hi, perms, kind, moved]
        self.heap_start = heap_start
        self.heap_max = heap_max
        self.heap_top = heap_start
        self.bytes = {}

    def _find(self, va):
        for iv in self.iv:
            if iv[0] <= va < iv[1]:
                return iv
        return None

    def _cut(self, at):
        iv = self._find(at)
        if iv is not None and iv[0] != at:
            self.iv.remove(iv)
            self.iv += [[iv[0], at] + iv[2:], [at, iv[1]] + iv[2:]]
            self.iv.sort()

    def _inside(self, lo, hi):
        return [iv for iv in self.iv if iv[0] < hi and lo < iv[1]]

    def covered(self, lo, hi):
        cur = lo
        for iv in sorted(self._inside(lo, hi)):
            if iv[0] > cur:
                return False
            cur = iv[1]
        return cur >= hi

    def mmap(self, lo, size, perms):
        if self._inside(lo, lo + size):
            return False
        self.iv.append([lo, lo + size, perms, "anon", False])
        self.iv.sort()
        return True

    def munmap(self, lo, hi):
        self._cut(lo)
        self._cut(hi)
        for iv in self._inside(lo, hi):
            self.iv.remove(iv)
        for va in [v for v in self.bytes if lo <= v < hi]:
            del self.bytes[va]

    def mprotect(self, lo, hi, perms):
        if not self.covered(lo, hi):
            return False
        self._cut(lo)
        self._cut(hi)
        for iv in self._inside(lo, hi):
            iv[2] = perms
            iv[4] = True
        return True

    def brk(self, top):
        if top == 0 or top < self.heap_start or top > self.heap_start + self.heap_max:
            return self.heap_top
        old_end, new_end = page_up(self.heap_top), page_up(top)
        if new_end > old_end:
            last = self._find(old_end - 1) if old_end > self.heap_start else None
            if (last is not None and last[3] == "heap" and last[1] == old_end and not last[4]
                    and last[2] == PROT_READ | PROT_WRITE):
                last[1] = new_end
            else:
                self.iv.append([old_end, new_end, PROT_READ | PROT_WRITE, "heap", False])
                self.iv.sort()
        elif new_end < old_end:
            self.munmap(new_end, old_end)
        self.heap_top = top
        return top

    def allows(self, va, access):
        iv = self._find(va)
        if iv is None:
            return None
        return bool(iv[2] & ACCESS_BIT[access])

    def records(self):
        return [(lo, hi - lo, p) for lo, hi, p, _k, _m in sorted(self.iv)]


def memory_engine(**cfg):
    eng = Engine(build(".code\n_start:\n    nop\n"), host(), RunConfig(**cfg))
    eng.machine.eenter(0)
    return eng


def fuzz(seed, nops=1000):
    rng = random.Random(seed)
    eng = memory_engine()
    mv, m = eng.mv, eng.machine
    base_records = set(mv.snapshot())
    orc = IntervalOracle(mv.heap_start, mv.heap_max)
    window = (MMAP_BASE, MMAP_BASE + 64 * PAGE)
    heap = (mv.heap_start, mv.heap_start + 32 * PAGE)

    def pick_range():
        lo_w, hi_w = window if rng.random() < 0.7 else heap
        lo = lo_w + rng.randrange((hi_w - lo_w) // PAGE) * PAGE
        return lo, min(hi_w, lo + rng.randint(1, 8) * PAGE)

    for _ in range(nops):
        op = rng.choice(("mmap", "mmap", "munmap", "mprotect", "mprotect", "brk", "poke", "peek"))
        if op == "mmap":
            lo = window[0] + rng.randrange(64) * PAGE
            size = min(window[1] - lo, rng.randint(1, 8) * PAGE)
            prot = rng.randrange(8)
            m.map_public(lo, size)
            expect = orc.mmap(lo, size, prot)
            if expect:
                mv.install_mmap(lo, size, prot, 0, -1, 0, False, False)
            else:
                with pytest.raises(LayoutReject):
                    mv.install_mmap(lo, size, prot, 0, -1, 0, False, False)
        elif op == "munmap":
            lo, hi = pick_range()
            orc.munmap(lo, hi)
            mv.remove(lo, hi)
        elif op == "mprotect":
            lo, hi = pick_range()
            prot = rng.randrange(8)
            if orc.mprotect(lo, hi, prot):
                mv.protect(lo, hi, prot)
            else:
                with pytest.raises(UnmappedFault):
                    mv.protect(lo, hi, prot)
        elif op == "brk":
            top = mv.heap_start + rng.randint(-2, 40) * PAGE + rng.randrange(PAGE)
            assert mv.brk(top) == orc.brk(top)
        else:
            lo, hi = pick_range()
            va = rng.randrange(lo, hi)
            access = "write" if op == "poke" else "read"
            allowed = orc.allows(va, access)
            if allowed is None:
                with pytest.raises(UnmappedFault):
                    mv.xlat(va, access)
            elif not allowed:
                with pytest.raises(SoftPermFault):
                    mv.xlat(va, access)
            elif op == "poke":
                val = rng.randrange(1, 256)
                mv.write(va, bytes([val]))
                orc.bytes[va] = val
            else:
                assert mv.read(va, 1) == bytes([orc.bytes.get(va, 0)])
        got = [r for r in mv.snapshot() if r not in base_records]
        assert got == orc.records(), (seed, op)
    return eng
