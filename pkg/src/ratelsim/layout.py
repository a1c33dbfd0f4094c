"""Fixed placement of the engine's regions inside the enclave."""
from dataclasses import dataclass

from .abi import PAGE, page_up

ENCLAVE_BASE = 0x0001_0000
ENCLAVE_SPAN = 0x1000_0000
REGION_A = 0x0800_0000
REGION_A_DATA = 2 << 20
CACHE_BASE = 0x0900_0000
CACHE_REGION_MAX = 16 << 20
STASH_BASE = 0x0A00_0000
POOL_BASE = 0x0B00_0000
RELOC_BASE = 0x0D00_0000
RELOC_LIMIT = 0x0F00_0000
STAGING_BASE = 0x3000_0000
STAGING_SIZE = 4 << 20
BOUNCE_SIZE = 1 << 20
META_SLOT = 64


@dataclass
class EngineLayout:
    tcs_count: int = 4
    nssa: int = 3
    bb_max: int = 1 << 20
    stash_count: int = 8
    stash_size: int = 256 << 10
    pool_size: int = 16 << 20

    @property
    def region_a(self):
        return (REGION_A, REGION_A + self.region_a_size)

    @property
    def region_a_size(self):
        return REGION_A_DATA + PAGE * (1 + self.tcs_count * (1 + self.nssa))

    @property
    def cache(self):
        return (CACHE_BASE, CACHE_BASE + min(page_up(max(self.bb_max, 1)), CACHE_REGION_MAX))

    @property
    def stash(self):
        return (STASH_BASE, STASH_BASE + self.stash_count * page_up(self.stash_size))

    @property
    def pool(self):
        return (POOL_BASE, POOL_BASE + page_up(self.pool_size))

    def engine_ranges(self):
        return [self.region_a, self.cache, self.stash, self.pool]

    def in_engine(self, va):
        return any(lo <= va < hi for lo, hi in self.engine_ranges())

    def overlaps_engine(self, lo, hi):
        return any(a < hi and lo < b for a, b in self.engine_ranges())

    def overlaps_region_a(self, lo, hi):
        a, b = self.region_a
        return a < hi and lo < b


class RunAllocator:
    """First-fit allocator of contiguous page runs inside [base, base+size)."""

    def __init__(self, base, size):
        self.base = base
        self.size = size
        self.free = [(base, base + size)]

    def alloc(self, nbytes):
        for i, (lo, hi) in enumerate(self.free):
            if hi - lo >= nbytes:
                if hi - lo == nbytes:
                    del self.free[i]
                else:
                    self.free[i] = (lo + nbytes, hi)
                return lo
        return None

    def can_alloc(self, sizes):
        """Whether every request in ``sizes`` fits, allocating in order."""
        free = list(self.free)
        for n in sizes:
            for i, (lo, hi) in enumerate(free):
                if hi - lo >= n:
                    free[i] = (lo + n, hi)
                    break
            else:
                return False
        return True

    def release(self, va, nbytes):
        self.free.append((va, va + nbytes))
        self.free.sort()
        merged = []
        for lo, hi in self.free:
            if merged and merged[-1][1] >= lo:
                merged[-1] = (merged[-1][0], max(merged[-1][1], hi))
            else:
                merged.append((lo, hi))
        self.free = merged

    def contains(self, va):
        return self.base <= va < self.base + self.size

    @property
    def free_bytes(self):
        return sum(hi - lo for lo, hi in self.free)
