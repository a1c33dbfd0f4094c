"""Model of an SGX-v1 style machine.

Only the parts that matter for interposition are modelled: private (EPC)
pages bound 1-to-1 to enclave VAs with permissions frozen at EINIT, public
pages owned by the untrusted host, TCS slots with LIFO SSA frames, a single
registered entry point, asynchronous exits and the hardware spinlock. Every
violation of the five SGX restrictions raises the matching fault.
"""
from dataclasses import dataclass

from .abi import PAGE, PROT_EXEC, PROT_READ, PROT_WRITE
from .errors import (AccessFault, BusyTcs, DoubleMapFault, EnclaveAborted,
                     IncompleteLayout, InvalidConfig, InvalidEntryFault,
                     OutOfEpc, PermFault, PostInitMutation, SharingFault)

PAGE_KINDS = ("code", "data", "stack", "heap", "stash", "tcs", "ssa")
PRE_INIT = "pre-init"
INITIALIZED = "initialized"
ABORTED = "aborted"
SAVED = "saved"
ABORT = "aborted"
_ACCESS_BIT = {"read": PROT_READ, "write": PROT_WRITE, "fetch": PROT_EXEC}


@dataclass
class MachineConfig:
    epc_size: int = 64 << 20
    public_size: int = 64 << 20
    nssa: int = 3
    tcs_count: int = 4
    entry_va: int = 0x0800_0000
    enclave_base_va: int = 0x1_0000
    enclave_span: int = 0x1000_0000

    def validate(self):
        if self.epc_size <= 0 or self.public_size <= 0 or self.enclave_span <= 0:
            raise InvalidConfig("sizes must be positive")
        if self.nssa < 1:
            raise InvalidConfig("nssa must be at least 1")
        if self.tcs_count < 1:
            raise InvalidConfig("tcs_count must be at least 1")
        if self.enclave_base_va % PAGE or self.enclave_span % PAGE:
            raise InvalidConfig("enclave range must be page aligned")
        if self.enclave_base_va + self.enclave_span > 1 << 64:
            raise InvalidConfig("enclave range wraps")
        if not self.enclave_base_va <= self.entry_va < self.enclave_base_va + self.enclave_span:
            raise InvalidConfig("entry point outside the enclave")
        return self


class EpcPage:
    __slots__ = ("frame_id", "bound_va", "perms", "kind", "data")

    def __init__(self, frame_id, bound_va, perms, kind):
        self.frame_id = frame_id
        self.bound_va = bound_va
        self.perms = perms
        self.kind = kind
        self.data = None


@dataclass
class SsaFrame:
    saved_ctx: object
    reason: str


class TcsSlot:
    def __init__(self, slot_id, nssa):
        self.id = slot_id
        self.state = "free"
        self.ssa_frames = [None] * nssa
        self.ssa_cursor = 0
        self.in_enclave = False


class Platform:
    """Physical EPC shared by every enclave on one machine."""

    def __init__(self):
        self.next_frame = 0
        self.owner = {}

    def fresh_frame(self):
        f = self.next_frame
        self.next_frame += 1
        return f


class Machine:
    """One enclave plus the address space of its host process."""

    def __init__(self, cfg, platform=None):
        self.cfg = cfg.validate()
        self.platform = platform or Platform()
        self.state = PRE_INIT
        self.lo = cfg.enclave_base_va
        self.hi = cfg.enclave_base_va + cfg.enclave_span
        self.pages = {}
        self.frames = {}
        self.public = {}
        self.tcs = []
        self.current = None
        self.abort_reason = None
        self.entry_log = []
        self.handler_entries = [cfg.entry_va]
        self.stats = {"eenter": 0, "eexit": 0, "aex": 0, "eresume": 0,
                      "host_private_denied": 0, "host_private_ok": 0}

    # -- construction -----------------------------------------------------
    def is_private(self, va):
        return self.lo <= va < self.hi

    def eadd_page(self, va, perms, kind, frame=None, data=None):
        if self.state != PRE_INIT:
            raise PostInitMutation(f"EADD of {va:#x} after EINIT")
        if va % PAGE:
            raise InvalidConfig(f"page {va:#x} not aligned")
        if not self.is_private(va):
            raise InvalidConfig(f"page {va:#x} outside the enclave range")
        if kind not in PAGE_KINDS:
            raise InvalidConfig(f"bad page kind {kind!r}")
        if va in self.pages:
            raise DoubleMapFault(f"VA {va:#x} already bound to frame {self.pages[va].frame_id}")
        if frame is not None:
            owner = self.platform.owner.get(frame)
            if owner is not None and owner[0] is not self:
                raise SharingFault(f"frame {frame} belongs to another enclave")
            if owner is not None:
                raise DoubleMapFault(f"frame {frame} already bound to {owner[1]:#x}")
        if (len(self.pages) + 1) * PAGE > self.cfg.epc_size:
            raise OutOfEpc(f"EPC exhausted adding {va:#x}")
        if frame is None:
            frame = self.platform.fresh_frame()
        page = EpcPage(frame, va, perms, kind)
        if data and any(data):
            page.data = bytearray(data[:PAGE].ljust(PAGE, b"\0"))
        self.pages[va] = page
        self.frames[frame] = va
        self.platform.owner[frame] = (self, va)
        return page

    def eadd_range(self, va, size, perms, kind):
        for off in range(0, size, PAGE):
            self.eadd_page(va + off, perms, kind)

    def einit(self):
        if self.state != PRE_INIT:
            raise PostInitMutation("EINIT twice")
        kinds = {}
        for p in self.pages.values():
            kinds[p.kind] = kinds.get(p.kind, 0) + 1
        if not kinds.get("code"):
            raise IncompleteLayout("no code page")
        if kinds.get("tcs", 0) < self.cfg.tcs_count:
            raise IncompleteLayout(f"need {self.cfg.tcs_count} TCS pages")
        if kinds.get("ssa", 0) < self.cfg.tcs_count * self.cfg.nssa:
            raise IncompleteLayout("missing SSA frames")
        self.tcs = [TcsSlot(i, self.cfg.nssa) for i in range(self.cfg.tcs_count)]
        self.state = INITIALIZED

    def hw_mprotect(self, va, perms):
        if self.state != PRE_INIT:
            raise PostInitMutation(f"permission change of {va:#x} after EINIT")
        self.pages[va].perms = perms

    def hw_retype(self, va, kind):
        if self.state != PRE_INIT:
            raise PostInitMutation(f"type change of {va:#x} after EINIT")
        self.pages[va].kind = kind

    # -- control transfer -------------------------------------------------
    def _live(self):
        if self.state == ABORTED:
            raise EnclaveAborted(self.abort_reason or "enclave aborted")
        if self.state != INITIALIZED:
            raise InvalidConfig("enclave not initialized")

    def eenter(self, tcs, va=None):
        """Enter through the registered entry point; returns the entry pc."""
        self._live()
        va = self.cfg.entry_va if va is None else va
        if va != self.cfg.entry_va:
            raise InvalidEntryFault(f"entry at {va:#x}, only {self.cfg.entry_va:#x} is valid")
        slot = self.tcs[tcs]
        if slot.in_enclave:
            raise BusyTcs(f"TCS {tcs} already executing")
        slot.state = "busy"
        slot.in_enclave = True
        self.current = tcs
        self.entry_log.append(va)
        self.stats["eenter"] += 1
        return va

    def eexit(self, tcs, final=False):
        self._live()
        slot = self.tcs[tcs]
        slot.in_enclave = False
        if final:
            slot.state = "free"
            slot.ssa_frames = [None] * self.cfg.nssa
            slot.ssa_cursor = 0
        if self.current == tcs:
            self.current = None
        self.stats["eexit"] += 1

    def aex(self, tcs, reason, ctx):
        """Asynchronous exit; pushes ``ctx`` into the next SSA frame."""
        self._live()
        slot = self.tcs[tcs]
        if not slot.in_enclave:
            raise InvalidConfig(f"AEX on TCS {tcs} outside enclave mode")
        if slot.ssa_cursor >= self.cfg.nssa:
            self.abort(f"no free SSA frame on TCS {tcs} ({reason})")
            return ABORT
        slot.ssa_frames[slot.ssa_cursor] = SsaFrame(ctx.copy(), reason)
        slot.ssa_cursor += 1
        slot.in_enclave = False
        if self.current == tcs:
            self.current = None
        self.stats["aex"] += 1
        return SAVED

    def eresume(self, tcs):
        """Resume from the newest SSA frame; returns the saved context."""
        self._live()
        slot = self.tcs[tcs]
        if slot.in_enclave:
            raise BusyTcs(f"TCS {tcs} already executing")
        if slot.ssa_cursor == 0:
            raise InvalidEntryFault(f"ERESUME on TCS {tcs} with no saved context")
        slot.ssa_cursor -= 1
        frame = slot.ssa_frames[slot.ssa_cursor]
        slot.ssa_frames[slot.ssa_cursor] = None
        slot.in_enclave = True
        self.current = tcs
        self.entry_log.append(frame.saved_ctx.pc)
        self.stats["eresume"] += 1
        return frame.saved_ctx.copy()

    def ssa_top(self, tcs):
        slot = self.tcs[tcs]
        return slot.ssa_frames[slot.ssa_cursor - 1] if slot.ssa_cursor else None

    def switch_to(self, tcs):
        """Make an in-enclave TCS the one the model attributes accesses to."""
        if not self.tcs[tcs].in_enclave:
            raise InvalidConfig(f"TCS {tcs} is not in enclave mode")
        self.current = tcs

    def abort(self, reason):
        self.state = ABORTED
        self.abort_reason = reason

    @property
    def aborted(self):
        return self.state == ABORTED

    def free_tcs(self):
        return [s.id for s in self.tcs if s.state == "free"]

    # -- memory -----------------------------------------------------------
    def _check_private(self, who, va, kind):
        if who == "host":
            self.stats["host_private_denied"] += 1
            raise AccessFault(va, who)
        if self.state == ABORTED:
            raise EnclaveAborted(self.abort_reason)
        if self.current is None or not self.tcs[self.current].in_enclave:
            raise AccessFault(va, who, f"{who} access to {va:#x} outside enclave mode")
        page = self.pages.get(va & ~(PAGE - 1))
        if page is None:
            raise AccessFault(va, who, f"no EPC page at {va:#x}")
        if not page.perms & _ACCESS_BIT[kind]:
            raise PermFault(va, kind)
        return page

    def _check_public(self, who, va, kind):
        page = self.public.get(va & ~(PAGE - 1))
        if page is None:
            raise AccessFault(va, who, f"no public mapping at {va:#x}")
        if kind == "fetch" and who != "host":
            raise AccessFault(va, who, f"enclave fetch from public memory {va:#x}")
        return page

    def read(self, who, va, n, kind="read"):
        out = bytearray()
        while n > 0:
            base = va & ~(PAGE - 1)
            off = va - base
            chunk = min(n, PAGE - off)
            if self.lo <= va < self.hi:
                data = self._check_private(who, va, kind).data
            else:
                data = self._check_public(who, va, kind)
            out += data[off:off + chunk] if data is not None else bytes(chunk)
            va += chunk
            n -= chunk
        return bytes(out)

    def write(self, who, va, data):
        pos = 0
        n = len(data)
        while pos < n:
            base = va & ~(PAGE - 1)
            off = va - base
            chunk = min(n - pos, PAGE - off)
            if self.lo <= va < self.hi:
                page = self._check_private(who, va, "write")
                if page.data is None:
                    page.data = bytearray(PAGE)
                page.data[off:off + chunk] = data[pos:pos + chunk]
            else:
                buf = self._check_public(who, va, "write")
                buf[off:off + chunk] = data[pos:pos + chunk]
            va += chunk
            pos += chunk

    def read_u64(self, who, va):
        return int.from_bytes(self.read(who, va, 8), "little")

    def write_u64(self, who, va, value):
        self.write(who, va, (value & ((1 << 64) - 1)).to_bytes(8, "little"))

    def mem_access(self, who, va, kind, data=None, n=8):
        """Single entry point mirroring the textbook operation."""
        if kind == "write":
            self.write(who, va, data)
            return b""
        return self.read(who, va, n, kind)

    # public memory is managed by the host
    def map_public(self, va, size):
        for off in range(0, size, PAGE):
            p = va + off
            if self.is_private(p):
                raise AccessFault(p, "host", f"public map over enclave range {p:#x}")
            if p not in self.public:
                if (len(self.public) + 1) * PAGE > self.cfg.public_size:
                    raise OutOfEpc("public memory exhausted")
                self.public[p] = bytearray(PAGE)

    def unmap_public(self, va, size):
        for off in range(0, size, PAGE):
            self.public.pop(va + off, None)

    # -- spinlock ---------------------------------------------------------
    def hw_spinlock(self, word_va, op, who="engine"):
        """Test-and-set on a private word. ``acquire`` returns True when taken."""
        if not self.is_private(word_va):
            raise AccessFault(word_va, who, f"spinlock word {word_va:#x} is not private")
        cur = self.read_u64(who, word_va)
        if op == "acquire":
            if cur:
                return False
            self.write_u64(who, word_va, 1)
            return True
        if op == "release":
            self.write_u64(who, word_va, 0)
            return True
        raise ValueError(op)

    def spin_acquire(self, word_va, yield_fn=None, who="engine"):
        spins = 0
        while not self.hw_spinlock(word_va, "acquire", who):
            spins += 1
            if yield_fn is None:
                raise RuntimeError("spinlock held and nobody to yield to")
            yield_fn()
        return spins


def ecreate(cfg, platform=None):
    return Machine(cfg, platform)
