"""In-enclave memory manager.

The engine keeps its own procmap-like view of the guest address space. Each
:class:`RegionRecord` maps an original (app-visible) range onto an actual
private range with a fixed offset; the app's logical permissions are
enforced in software on every access because hardware permissions are
frozen at EINIT. Permission changes move content into a pre-reserved rwx
stash, mmap mirrors come from a pre-reserved pool, and file mappings keep a
public twin that is synchronised at msync, fsync, munmap and exit.
"""
from dataclasses import dataclass

from .abi import PAGE, PROT_EXEC, PROT_READ, PROT_WRITE, page_up
from .errors import (AccessFault, IsolationFault, LayoutReject, OutOfReservedMemory,
                     SoftPermFault, StashExhausted, UnmappedFault)
from .layout import META_SLOT, RunAllocator

ACCESS_BIT = {"read": PROT_READ, "write": PROT_WRITE, "fetch": PROT_EXEC}
_LOW = PAGE - 1
_HIGH = ~_LOW


def perm_str(p):
    return ("r" if p & PROT_READ else "-") + ("w" if p & PROT_WRITE else "-") + \
           ("x" if p & PROT_EXEC else "-")


@dataclass
class RegionRecord:
    orig_va: int
    length: int
    logical_perms: int
    actual_va: int
    backing: str                 # image, stack, heap, anon, file
    public_twin_va: int = None
    file_fd: int = None
    file_offset: int = 0
    shared: bool = False
    meta_va: int = 0

    @property
    def end(self):
        return self.orig_va + self.length

    @property
    def delta(self):
        return self.actual_va - self.orig_va

    def piece(self, lo, hi):
        """The sub-record covering [lo, hi) with the same affine shift."""
        off = lo - self.orig_va
        return RegionRecord(lo, hi - lo, self.logical_perms, self.actual_va + off, self.backing,
                            None if self.public_twin_va is None else self.public_twin_va + off,
                            self.file_fd, self.file_offset + off if self.backing == "file" else 0,
                            self.shared)

    def describe(self):
        twin = f" twin={self.public_twin_va:#x}" if self.public_twin_va is not None else ""
        return (f"{self.orig_va:#014x}-{self.end:#014x} {perm_str(self.logical_perms)} "
                f"-> {self.actual_va:#014x} {self.backing}{twin}")


class MetaSlab:
    """Fixed-size metadata slots inside region A."""

    def __init__(self, machine, base, size, slot=META_SLOT):
        self.machine = machine
        self.base = base
        self.limit = base + size
        self.slot = slot
        self.next = base
        self.freed = []

    def alloc(self):
        if self.freed:
            return self.freed.pop()
        if self.next + self.slot > self.limit:
            raise OutOfReservedMemory("engine metadata area full")
        va = self.next
        self.next += self.slot
        return va

    def free(self, va):
        self.machine.write("engine", va, bytes(self.slot))
        self.freed.append(va)

    def store(self, va, *words):
        self.machine.write("engine", va, b"".join((w & ((1 << 64) - 1)).to_bytes(8, "little")
                                                  for w in words))


class MemViews:
    """Procmap mirror plus the address translation used by every app access."""

    def __init__(self, machine, layout, slab, heap_start, heap_max):
        self.machine = machine
        self.layout = layout
        self.slab = slab
        self.records = []
        self.pages = {}
        self.pool = RunAllocator(*_span(layout.pool))
        self.stash = RunAllocator(*_span(layout.stash))
        self.heap_start = heap_start
        self.heap_top = heap_start
        self.heap_max = heap_max
        self.heap_delta = 0
        self.stats = {"relocations": 0, "sync_backs": 0, "stash_peak": 0, "pool_peak": 0}
        self.on_change = None

    # -- records ----------------------------------------------------------
    def _store_meta(self, rec):
        if not rec.meta_va:
            rec.meta_va = self.slab.alloc()
        self.slab.store(rec.meta_va, rec.orig_va, rec.length, rec.logical_perms, rec.actual_va,
                        rec.public_twin_va or 0, rec.file_offset)

    def insert(self, rec):
        for r in self.records:
            if r.orig_va < rec.end and rec.orig_va < r.end:
                raise LayoutReject("overlap")
        self.records.append(rec)
        self.records.sort(key=lambda r: r.orig_va)
        self._store_meta(rec)
        self._map(rec)

    def _map(self, rec):
        pages = self.machine.pages
        for off in range(0, rec.length, PAGE):
            self.pages[rec.orig_va + off] = (pages[rec.actual_va + off], rec.logical_perms)

    def _unmap(self, rec):
        for off in range(0, rec.length, PAGE):
            self.pages.pop(rec.orig_va + off, None)

    def _drop(self, rec):
        self.records.remove(rec)
        self._unmap(rec)
        if rec.meta_va:
            self.slab.free(rec.meta_va)
            rec.meta_va = 0

    def find(self, va):
        for r in self.records:
            if r.orig_va <= va < r.end:
                return r
        return None

    def overlapping(self, lo, hi):
        return [r for r in self.records if r.orig_va < hi and lo < r.end]

    def covered(self, lo, hi):
        cur = lo
        for r in self.overlapping(lo, hi):
            if r.orig_va > cur:
                return False
            cur = max(cur, r.end)
        return cur >= hi

    def _split(self, lo, hi):
        """Split records so that lo and hi fall on record boundaries."""
        for cut in (lo, hi):
            r = self.find(cut)
            if r is None or r.orig_va == cut:
                continue
            a, b = r.piece(r.orig_va, cut), r.piece(cut, r.end)
            self._drop(r)
            self.insert(a)
            self.insert(b)

    def snapshot(self):
        return [(r.orig_va, r.length, r.logical_perms) for r in self.records]

    def dump(self):
        return "\n".join(r.describe() for r in self.records)

    # -- translation ------------------------------------------------------
    def actual(self, va):
        e = self.pages.get(va & _HIGH)
        if e is None:
            self.miss(va)
        return e[0].bound_va + (va & _LOW)

    def miss(self, va):
        if self.layout.in_engine(va):
            raise IsolationFault(va)
        raise UnmappedFault(va)

    def xlat(self, va, access="read"):
        e = self.pages.get(va & _HIGH)
        if e is None:
            self.miss(va)
        if not e[1] & ACCESS_BIT[access]:
            raise SoftPermFault(va, access)
        return e[0].bound_va + (va & _LOW)

    def check(self, va, n, access):
        p = va & _HIGH
        end = va + n
        while p < end:
            self.xlat(max(p, va), access)
            p += PAGE

    def read(self, va, n, access="read"):
        out = bytearray()
        while n > 0:
            e = self.pages.get(va & _HIGH)
            if e is None:
                self.miss(va)
            if not e[1] & ACCESS_BIT[access]:
                raise SoftPermFault(va, access)
            off = va & _LOW
            k = min(n, PAGE - off)
            d = e[0].data
            out += d[off:off + k] if d is not None else bytes(k)
            va += k
            n -= k
        return bytes(out)

    def write(self, va, data, access="write"):
        pos = 0
        n = len(data)
        while pos < n:
            e = self.pages.get(va & _HIGH)
            if e is None:
                self.miss(va)
            if not e[1] & ACCESS_BIT[access]:
                raise SoftPermFault(va, access)
            off = va & _LOW
            k = min(n - pos, PAGE - off)
            page = e[0]
            if page.data is None:
                page.data = bytearray(PAGE)
            page.data[off:off + k] = data[pos:pos + k]
            va += k
            pos += k

    # memory protocol for the instruction executor
    def load(self, va, size):
        e = self.pages.get(va & _HIGH)
        off = va & _LOW
        if e is None or not e[1] & PROT_READ or off + size > PAGE:
            return int.from_bytes(self.read(va, size), "little")
        d = e[0].data
        return int.from_bytes(d[off:off + size], "little") if d is not None else 0

    def store(self, va, size, value):
        e = self.pages.get(va & _HIGH)
        off = va & _LOW
        if e is None or not e[1] & PROT_WRITE or off + size > PAGE:
            self.write(va, value.to_bytes(size, "little"))
            return
        page = e[0]
        if page.data is None:
            page.data = bytearray(PAGE)
        page.data[off:off + size] = value.to_bytes(size, "little")

    def fetch(self, va):
        return self.read(va, 8, "fetch")

    # -- helpers over actual memory -----------------------------------------
    def _zero(self, actual, size):
        for off in range(0, size, PAGE):
            if self.machine.pages[actual + off].data is not None:
                self.machine.write("engine", actual + off, bytes(PAGE))

    def _copy(self, src, dst, size):
        for off in range(0, size, PAGE):
            d = self.machine.pages[src + off].data
            if d is not None and any(d):
                self.machine.write("engine", dst + off, bytes(d))

    def _release(self, rec):
        """Give the actual pages of a (piece of a) record back, zeroed."""
        self._zero(rec.actual_va, rec.length)
        if self.stash.contains(rec.actual_va):
            self.stash.release(rec.actual_va, rec.length)
        elif self.pool.contains(rec.actual_va):
            self.pool.release(rec.actual_va, rec.length)

    def _note_peaks(self):
        self.stats["stash_peak"] = max(self.stats["stash_peak"], self.stash.size - self.stash.free_bytes)
        self.stats["pool_peak"] = max(self.stats["pool_peak"], self.pool.size - self.pool.free_bytes)

    # -- layout -----------------------------------------------------------
    def layout_check(self, lo, size):
        if lo < PAGE:
            raise LayoutReject("zero-page")
        if lo % PAGE or size <= 0:
            raise LayoutReject("unaligned")
        hi = lo + size
        if hi > 1 << 64:
            raise LayoutReject("wrap")
        if self.layout.overlaps_engine(lo, hi):
            raise LayoutReject("engine-overlap")
        if self.machine.is_private(lo) or self.machine.is_private(hi - 1):
            raise LayoutReject("enclave-range")
        if self.overlapping(lo, hi):
            raise LayoutReject("overlap")

    # -- partial emulation --------------------------------------------------
    def install_mmap(self, addr, length, prot, flags, fd, offset, shared, is_file):
        """Create the private mirror of a public mapping the host just made."""
        size = page_up(length)
        self.layout_check(addr, size)
        base = self.pool.alloc(size)
        if base is None:
            raise OutOfReservedMemory(f"pool cannot hold {size} bytes")
        try:
            data = self.machine.read("engine", addr, size)
        except AccessFault:
            self.pool.release(base, size)
            raise LayoutReject("no-public-twin") from None
        for off in range(0, size, PAGE):
            chunk = data[off:off + PAGE]
            if any(chunk):
                self.machine.write("engine", base + off, chunk)
        rec = RegionRecord(addr, size, prot, base, "file" if is_file else "anon", addr,
                           fd if is_file else None, offset if is_file else 0, shared and is_file)
        self.insert(rec)
        self._note_peaks()
        return addr

    def sync_back(self, lo=None, hi=None):
        """Copy private mirrors of shared file mappings to their public twins."""
        n = 0
        for r in list(self.records):
            if not (r.shared and r.public_twin_va is not None):
                continue
            a = r.orig_va if lo is None else max(lo, r.orig_va)
            b = r.end if hi is None else min(hi, r.end)
            if a >= b:
                continue
            data = self.machine.read("engine", r.actual_va + (a - r.orig_va), b - a)
            self.machine.write("engine", r.public_twin_va + (a - r.orig_va), data)
            n += 1
        if n:
            self.stats["sync_backs"] += n
        return n

    def has_twin(self, lo, hi):
        return any(r.public_twin_va is not None for r in self.overlapping(lo, hi))

    def remove(self, lo, hi):
        """munmap semantics: drop [lo, hi), splitting records at the edges."""
        self._split(lo, hi)
        for r in self.overlapping(lo, hi):
            self._drop(r)
            self._release(r)
        self._changed(lo, hi)

    def protect(self, lo, hi, prot):
        """mprotect semantics: relocate to the stash and set logical perms.

        All-or-nothing: raises UnmappedFault or StashExhausted before any
        state changes.
        """
        if not self.covered(lo, hi):
            raise UnmappedFault(lo)
        needs = []
        for r in self.overlapping(lo, hi):
            if not self.stash.contains(r.actual_va):
                needs.append(min(hi, r.end) - max(lo, r.orig_va))
        if not self.stash.can_alloc(needs):
            raise StashExhausted(f"stash cannot hold {sum(needs)} bytes")
        self._split(lo, hi)
        for r in self.overlapping(lo, hi):
            self._drop(r)
            if not self.stash.contains(r.actual_va):
                dst = self.stash.alloc(r.length)
                self._copy(r.actual_va, dst, r.length)
                self._release(r)
                r.actual_va = dst
                self.stats["relocations"] += 1
            r.logical_perms = prot
            r.meta_va = 0
            self.insert(r)
        self._note_peaks()
        self._changed(lo, hi)

    def brk(self, new_top):
        if new_top == 0 or new_top < self.heap_start or new_top > self.heap_start + self.heap_max:
            return self.heap_top
        old_end, new_end = page_up(self.heap_top), page_up(new_top)
        if new_end > old_end:
            last = self.find(old_end - 1) if old_end > self.heap_start else None
            if (last is not None and last.backing == "heap" and last.end == old_end
                    and last.delta == self.heap_delta and last.logical_perms == PROT_READ | PROT_WRITE):
                self._drop(last)
                last.length += new_end - old_end
                last.meta_va = 0
                self.insert(last)
            else:
                self.insert(RegionRecord(old_end, new_end - old_end, PROT_READ | PROT_WRITE,
                                         old_end + self.heap_delta, "heap"))
        elif new_end < old_end:
            self.remove(new_end, old_end)
        self.heap_top = new_top
        return new_top

    def _changed(self, lo, hi):
        if self.on_change is not None:
            self.on_change(lo, hi)


def _span(rng):
    lo, hi = rng
    return lo, hi - lo
