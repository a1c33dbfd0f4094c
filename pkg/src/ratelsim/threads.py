"""Thread support under enclave constraints.

Each virtual thread owns up to three TLS segments living in region A:
the one the SGX runtime expects, the engine's and the app's. Only two base
registers exist, so the segments are chained through a link field and the
active segment is always the last element reachable from the head.
"""
from collections import deque

from .errors import ListOverflow, RatelError
from .sched import GuestThread

OWNERS = ("sgx-primary", "engine", "app")
_OWNER_CODE = {name: i + 1 for i, name in enumerate(OWNERS)}
_CODE_OWNER = {v: k for k, v in _OWNER_CODE.items()}
SEG_SIZE = 64
MAX_SEGMENTS = 3

# field offsets inside a segment
F_SB0, F_SB1, F_NEXT, F_OWNER = 0, 8, 16, 24


class TlsList:
    """Linked list of TLS segments stored in private memory.

    ``slots`` are three pre-allocated segment addresses; the head is always
    ``slots[0]``, which holds the sgx-primary segment.
    """

    def __init__(self, machine, slots):
        if len(slots) != MAX_SEGMENTS:
            raise RatelError("a TLS list needs exactly three segment slots")
        self.m = machine
        self.slots = list(slots)
        self.head = slots[0]
        self._put(self.head, 0, 0, 0, "sgx-primary")

    def _put(self, va, sb0, sb1, nxt, owner):
        self.m.write("engine", va, b"".join(v.to_bytes(8, "little") for v in
                                            (sb0, sb1, nxt, _OWNER_CODE[owner])))

    def _get(self, va):
        raw = self.m.read("engine", va, 32)
        w = [int.from_bytes(raw[i:i + 8], "little") for i in range(0, 32, 8)]
        return w[0], w[1], w[2], _CODE_OWNER[w[3]]

    def chain(self):
        """[(va, owner, sb0, sb1)] from the head, following links."""
        out = []
        va = self.head
        seen = set()
        while va:
            if va in seen or len(out) > MAX_SEGMENTS:
                raise RatelError("TLS chain is cyclic")
            seen.add(va)
            sb0, sb1, nxt, owner = self._get(va)
            out.append((va, owner, sb0, sb1))
            va = nxt
        return out

    def owners(self):
        return [c[1] for c in self.chain()]

    def push(self, owner, sb0=0, sb1=0):
        chain = self.chain()
        if len(chain) >= MAX_SEGMENTS:
            raise ListOverflow(f"TLS list already holds {len(chain)} segments")
        seg = self.slots[len(chain)]
        self._put(seg, sb0, sb1, 0, owner)
        last_va, last_owner, lsb0, lsb1 = chain[-1]
        self._put(last_va, lsb0, lsb1, seg, last_owner)
        return seg

    def pop(self):
        chain = self.chain()
        if len(chain) <= 1:
            raise RatelError("cannot pop the sgx-primary segment")
        va, owner, sb0, sb1 = chain[-1]
        prev_va, prev_owner, psb0, psb1 = chain[-2]
        self._put(prev_va, psb0, psb1, 0, prev_owner)
        self.m.write("engine", va, bytes(SEG_SIZE))
        return owner, sb0, sb1

    def restore(self):
        """Activate the last segment; returns (owner, sb0, sb1)."""
        _va, owner, sb0, sb1 = self.chain()[-1]
        return owner, sb0, sb1

    def set_bases(self, sb0, sb1):
        """Update the saved base registers of the active (last) segment."""
        va, owner, _a, _b = self.chain()[-1]
        nxt = self._get(va)[2]
        self._put(va, sb0, sb1, nxt, owner)

    def wipe(self):
        for va in self.slots:
            self.m.write("engine", va, bytes(SEG_SIZE))


class VThread(GuestThread):
    def __init__(self, tid, ctx):
        super().__init__(tid, ctx)
        self.tcs = None
        self.tls = None
        self.nest = []          # [frame_va, owner, finished] per running handler
        self.entered = False
        self.out_entry = False  # woken by an ECALL to take a pending signal
        self.cursor = None      # (block, index, generation) to resume mid-block
        self.siginfo = 0


class TcsManager:
    """Hands out TCS slots; waiters are served FIFO."""

    def __init__(self, count):
        self.free = list(range(count))
        self.waiters = deque()
        self.owner = {}
        self.peak = 0
        self.grants = []

    def acquire(self, vt):
        """Slot id, or None after queueing ``vt``."""
        if self.free:
            slot = self.free.pop(0)
            self._grant(vt, slot)
            return slot
        self.waiters.append(vt)
        return None

    def _grant(self, vt, slot):
        self.owner[slot] = vt.tid
        self.grants.append((vt.tid, slot))
        self.peak = max(self.peak, len(self.owner))

    def release(self, slot):
        """Free ``slot``; returns the waiter that inherits it, if any."""
        self.owner.pop(slot, None)
        if self.waiters:
            vt = self.waiters.popleft()
            self._grant(vt, slot)
            return vt, slot
        self.free.append(slot)
        self.free.sort()
        return None

    @property
    def occupied(self):
        return len(self.owner)
