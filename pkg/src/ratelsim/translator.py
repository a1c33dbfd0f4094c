"""The in-enclave dynamic binary translator.

The engine owns region A (trampoline, TCS/SSA pages, metadata), a code
cache, a stash and a mirror pool, all added before EINIT. App segments are
loaded at their preferred addresses when those are free and relocated
otherwise; every app access goes through :class:`MemViews`, so the app only
ever sees its original addresses.

Guest code never runs from app memory. Blocks are decoded from app pages,
written into the code cache and executed from the copy there, with
``sys``, ``rdtime``/``cpuinfo``/``wrsb*`` and ``sigret`` ending a block as
stubs that call back into the engine.
"""
import logging
from dataclasses import dataclass, fields

from .abi import (ARCH_GET_SB0, ARCH_GET_SB1, ARCH_SET_SB0, ARCH_SET_SB1, E2BIG,
                  EAGAIN, EFAULT, EINVAL, ENOMEM, ENOSYS, MAIN_TID, MAP_ANON,
                  MAP_SHARED, MASK64, MAX_THREADS, PAGE, PROT_ALL, PROT_EXEC,
                  PROT_READ, PROT_WRITE, SIGNAL_NAMES, SIGSTACK_BASE, SIGSTACK_SIZE,
                  STACK_SIZE, STACK_TOP, SYS_ARCHCTL, SYS_BRK, SYS_CLONE, SYS_EXIT,
                  SYS_EXIT_GROUP, SYS_FSYNC, SYS_FUTEX, SYS_MMAP, SYS_MPROTECT,
                  SYS_MSYNC, SYS_MUNMAP, SYS_SIGACTION, page_up, to_signed)
from .errors import (CacheTooSmall, CloneReject, EnclaveAborted, GuestFault,
                     InvalidConfig, LayoutReject, MarshalTooLarge, OutOfReservedMemory,
                     OverlapError, StashExhausted)
from .gateway import TABLE, Gateway, PublicStage, call_digest, out_capacity, resolve_in
from .isa import (BRANCHES, ILLEGAL, ILLEGAL_IN_ENCLAVE, NEXT, OP_CPUINFO, OP_JMP,
                  OP_RDTIME, OP_SIGRET, OP_SYS, OP_WRSB0, SIGRET, SYSCALL, GuestContext,
                  Instr, decode, encode, execute)
from .layout import (BOUNCE_SIZE, CACHE_BASE, ENCLAVE_BASE, ENCLAVE_SPAN, REGION_A,
                     REGION_A_DATA, RELOC_BASE, RELOC_LIMIT, STAGING_BASE, STAGING_SIZE,
                     EngineLayout)
from .locks import BLOCK, LockManager
from .machine import ABORT, Machine, MachineConfig
from .memviews import MemViews, MetaSlab, RegionRecord
from .sched import (BLOCKED_FUTEX, BLOCKED_TCS, EV_FAULT, EV_SIGRET, EV_SYSCALL, EXITED,
                    RUNNABLE, World)
from .signals import SecondaryRegistry, SignalVirt, sigret_fault
from .threads import TcsManager, TlsList, VThread
from .trace import digest_bytes

log = logging.getLogger("ratelsim.engine")

RW = PROT_READ | PROT_WRITE
RWX = PROT_ALL
TERMINATORS = ("branch", "syscall-stub", "illegal-stub", "fallthrough")


@dataclass
class RunConfig:
    epc_size: int = 64 << 20
    public_size: int = 64 << 20
    tcs: int = 4
    nssa: int = 3
    bb_max: int = 1 << 20
    traces_enabled: bool = True
    max_bb_insts: int = 64
    max_trace_bbs: int = 8
    hot_threshold: int = 16
    stash_count: int = 8
    stash_size: int = 256 << 10
    pool_size: int = 16 << 20
    heap_max: int = 1 << 20
    quantum: int = 64
    seed: int = None
    max_retired: int = 20_000_000
    sync_mode: str = "manager"
    ocall_cost: int = 1000
    copy_unit: int = 64
    loglevel: int = 0

    def validate(self):
        for f in ("tcs", "nssa", "max_bb_insts", "max_trace_bbs", "hot_threshold", "quantum",
                  "stash_count", "copy_unit"):
            if getattr(self, f) < 1:
                raise InvalidConfig(f"{f} must be at least 1")
        for f in ("bb_max", "stash_size", "pool_size", "heap_max", "epc_size", "public_size"):
            if getattr(self, f) <= 0:
                raise InvalidConfig(f"{f} must be positive")
        if self.heap_max % PAGE or self.stash_size % PAGE or self.pool_size % PAGE:
            raise InvalidConfig("heap, stash and pool sizes must be page multiples")
        return self

    @classmethod
    def names(cls):
        return [f.name for f in fields(cls)]


# -- code cache ---------------------------------------------------------------

@dataclass
class BasicBlock:
    orig_start: int
    instrs: list
    terminator: str
    size_bytes: int
    cache_va: int = 0
    execs: int = 0

    @property
    def orig_end(self):
        return self.orig_start + 8 * len(self.instrs)


@dataclass
class Trace:
    head: int
    blocks: list
    size_bytes: int
    execs: int = 0


# the slot after every block: jump back to the dispatcher in region A
_EXIT_STUB = encode(Instr(OP_JMP, imm=REGION_A))


class CodeCache:
    """Translated blocks in the cache region with flush-all eviction."""

    def __init__(self, machine, base, region_size, bb_max, traces_enabled=True,
                 max_trace_bbs=8, hot_threshold=16):
        self.machine = machine
        self.base = base
        self.bb_max = bb_max
        self.cap = min(bb_max, region_size)
        self.blocks = {}
        self.bytes_used = 0
        self.bytes_peak = 0
        self.traces_enabled = traces_enabled
        self.max_trace_bbs = max_trace_bbs
        self.hot_threshold = hot_threshold
        self.traces = {}
        self.trace_bytes_used = 0
        self.trace_bytes_peak = 0
        self.recording = None
        self.gen = 0
        self.built = 0
        self.flushes = 0
        self.invalidations = 0
        self.trace_execs = 0

    def insert(self, blk):
        need = blk.size_bytes
        if need > self.cap:
            raise CacheTooSmall(f"block at {blk.orig_start:#x} needs {need} bytes, "
                                f"cache holds {self.cap}")
        if self.bytes_used + need > self.cap:
            self.flush()
        blk.cache_va = self.base + self.bytes_used
        self.bytes_used += need
        assert self.bytes_used <= self.bb_max
        self.bytes_peak = max(self.bytes_peak, self.bytes_used)
        self.blocks[blk.orig_start] = blk
        self.built += 1

    def flush(self):
        self.blocks.clear()
        self.traces.clear()
        self.bytes_used = 0
        self.trace_bytes_used = 0
        self.recording = None
        self.gen += 1
        self.flushes += 1

    def invalidate(self, lo, hi):
        if any(b.orig_start < hi and lo < b.orig_end for b in self.blocks.values()):
            self.flush()
            self.flushes -= 1
            self.invalidations += 1

    def enter(self, blk):
        """Bookkeeping on every block entry: execution counts and traces."""
        blk.execs += 1
        start = blk.orig_start
        rec = self.recording
        if rec is not None:
            if start == rec[0] or len(rec) >= self.max_trace_bbs:
                self._close(rec)
            else:
                rec.append(start)
                return
        t = self.traces.get(start)
        if t is not None:
            t.execs += 1
            self.trace_execs += 1
        elif self.traces_enabled and blk.execs >= self.hot_threshold:
            self.recording = [start]

    def _close(self, rec):
        self.recording = None
        if len(rec) < 2 or any(s not in self.blocks for s in rec):
            return
        size = sum(self.blocks[s].size_bytes for s in rec)
        if size > self.cap:
            return
        if self.trace_bytes_used + size > self.cap:
            self.traces.clear()
            self.trace_bytes_used = 0
        self.traces[rec[0]] = Trace(rec[0], list(rec), size)
        self.trace_bytes_used += size
        self.trace_bytes_peak = max(self.trace_bytes_peak, self.trace_bytes_used)


# -- host window ----------------------------------------------------------------

class PublicWindow:
    """What the untrusted host sees: public memory only."""

    def __init__(self, machine):
        self.m = machine

    def read(self, va, n):
        return self.m.read("host", va, n)

    def write(self, va, data):
        self.m.write("host", va, data)

    def map(self, va, size, prot):
        self.m.map_public(va, size)

    def unmap(self, va, size):
        self.m.unmap_public(va, size)

    def protect(self, va, size, prot):
        pass


_BLOCKED = object()
_GONE = object()


class Engine(World):
    name = "dbt"

    def __init__(self, binary, host, cfg=None, script=None, test_harness=False):
        cfg = (cfg or RunConfig()).validate()
        super().__init__(host, script, cfg.quantum, cfg.seed, cfg.max_retired)
        self.cfg = cfg
        self.binary = binary
        self.counters = {"ocalls": 0, "ecalls": 0}
        self.counts = {}
        self.cache_fetches = 0
        self.direct_fetches = 0
        self._bounce_off = 0
        self._unticked = 0
        self.layout = EngineLayout(cfg.tcs, cfg.nssa, cfg.bb_max, cfg.stash_count,
                                   cfg.stash_size, cfg.pool_size)
        self.machine = Machine(MachineConfig(cfg.epc_size, cfg.public_size, cfg.nssa, cfg.tcs,
                                             REGION_A, ENCLAVE_BASE, ENCLAVE_SPAN))
        self.public = PublicWindow(self.machine)
        self._init_enclave(test_harness)

    # -- init -------------------------------------------------------------
    def _init_enclave(self, test_harness):
        cfg, m, lay = self.cfg, self.machine, self.layout
        # region A: trampoline, TCS and SSA pages, then engine data
        m.eadd_page(REGION_A, PROT_READ | PROT_EXEC, "code", data=_EXIT_STUB)
        va = REGION_A + PAGE
        for _ in range(cfg.tcs):
            m.eadd_page(va, RW, "tcs")
            va += PAGE
            for _ in range(cfg.nssa):
                m.eadd_page(va, RW, "ssa")
                va += PAGE
        data = va
        m.eadd_range(data, REGION_A_DATA, RW, "data")
        self.engine_base = self._discover_base()
        self.bounce_va = data
        self.slab = MetaSlab(m, data + BOUNCE_SIZE, REGION_A_DATA - BOUNCE_SIZE)
        lo, hi = lay.cache
        m.eadd_range(lo, hi - lo, RWX, "code")
        lo, hi = lay.stash
        m.eadd_range(lo, hi - lo, RWX, "stash")
        lo, hi = lay.pool
        m.eadd_range(lo, hi - lo, RW, "data")
        self.cache = CodeCache(m, CACHE_BASE, lay.cache[1] - CACHE_BASE, cfg.bb_max,
                               cfg.traces_enabled, cfg.max_trace_bbs, cfg.hot_threshold)

        # app image, stacks and the statically reserved heap
        self._reloc = RELOC_BASE
        self.relocations = []
        records = []
        for seg in sorted(self.binary.segments, key=lambda s: s.preferred_va):
            size = page_up(seg.length)
            actual = self._place(seg.preferred_va, size)
            image = seg.image()
            kind = "code" if seg.kind == "code" else "data"
            for off in range(0, size, PAGE):
                m.eadd_page(actual + off, RW, kind, data=image[off:off + PAGE])
            records.append(RegionRecord(seg.preferred_va, size, seg.perms, actual, "image"))
        for lo, size in ((STACK_TOP - STACK_SIZE, STACK_SIZE),
                         (SIGSTACK_BASE, MAX_THREADS * SIGSTACK_SIZE)):
            actual = self._place(lo, size)
            m.eadd_range(actual, size, RW, "stack")
            records.append(RegionRecord(lo, size, RW, actual, "stack"))
        heap_start = self.binary.image_end
        heap_actual = self._place(heap_start, cfg.heap_max)
        m.eadd_range(heap_actual, cfg.heap_max, RW, "heap")

        self.siginfo_slots = []
        m.einit()
        m.map_public(STAGING_BASE, STAGING_SIZE)

        # engine metadata lives in region A, written from inside the enclave
        m.eenter(0)
        self.siginfo_slots = [self.slab.alloc() for _ in range(cfg.tcs)]
        self.mv = MemViews(m, lay, self.slab, heap_start, cfg.heap_max)
        self.mv.heap_delta = heap_actual - heap_start
        for rec in records:
            self.mv.insert(rec)
        self.mv.on_change = self.cache.invalidate
        self.registry = SecondaryRegistry(self.slab)
        self.locks = LockManager(self, cfg.sync_mode, test_harness)
        m.eexit(0, final=True)
        self.stage = PublicStage(m, STAGING_BASE, STAGING_SIZE)
        self.gateway = Gateway(self, self.stage)
        self.signals = SignalVirt(self)
        self.tcsm = TcsManager(cfg.tcs)
        self.host.adversary.engine_va = REGION_A

    def _discover_base(self):
        """Find the engine's own base by asking the machine where the entry lives."""
        page = self.machine.pages[self.machine.cfg.entry_va]
        return page.bound_va

    def _usable(self, lo, size):
        hi = lo + size
        if lo < ENCLAVE_BASE or hi > ENCLAVE_BASE + ENCLAVE_SPAN:
            return False
        if self.layout.overlaps_engine(lo, hi) or (lo < RELOC_LIMIT and RELOC_BASE < hi):
            return False
        return all((lo + off) not in self.machine.pages for off in range(0, size, PAGE))

    def _place(self, lo, size):
        """Identity placement when possible, otherwise the relocation area."""
        if self._usable(lo, size):
            return lo
        actual = self._reloc
        if actual + size > RELOC_LIMIT:
            raise OverlapError(f"no room to relocate {size} bytes from {lo:#x}")
        self._reloc += size
        self.relocations.append((lo, actual, size))
        return actual

    # -- interface used by the gateway and the lock manager -------------------
    def app_read(self, va, n, access="read"):
        return self.mv.read(va, n, access)

    def app_check(self, va, n, access):
        self.mv.check(va, n, access)

    def app_write(self, va, data):
        self.mv.write(va, data)

    def actual(self, va):
        return self.mv.actual(va)

    def bounce_reset(self):
        self._bounce_off = 0

    def bounce(self, data):
        va = self.bounce_va + self._bounce_off
        if self._bounce_off + len(data) > BOUNCE_SIZE:
            raise MarshalTooLarge("bounce buffer exhausted")
        if data:
            self.machine.write("engine", va, data)
        self._bounce_off += (len(data) + 7) & ~7
        return va

    def charge_copy(self, nbytes):
        if nbytes:
            self.host.clock.tick(-(-nbytes // self.cfg.copy_unit))

    def siginfo_va(self, vt):
        return self.siginfo_slots[vt.tcs]

    def wake_thread(self, vt):
        self.wake(vt)

    def xlat(self, who, orig_va, access="read"):
        if who == "engine":
            return orig_va if self.layout.in_engine(orig_va) else self.mv.actual(orig_va)
        return self.mv.xlat(orig_va, access)

    def ocall(self, vt, fn):
        """Leave the enclave, run ``fn`` on the host, come back in."""
        m = self.machine
        tls = vt.tls
        tls.set_bases(vt.ctx.sb0, vt.ctx.sb1)
        _owner, sb0, sb1 = tls.pop()
        m.eexit(vt.tcs)
        self.counters["ocalls"] += 1
        if self.cfg.loglevel >= 4:
            log.debug("ocall from tid %d on tcs %d", vt.tid, vt.tcs)
        self.host.clock.tick(self.cfg.ocall_cost)
        try:
            return fn()
        finally:
            m.eenter(vt.tcs)
            tls.restore()
            tls.push("app", sb0, sb1)
            vt.ctx.sb0, vt.ctx.sb1 = sb0, sb1

    def _ecall(self, vt):
        self.machine.eenter(vt.tcs)
        self.counters["ecalls"] += 1
        self.host.clock.tick(self.cfg.ocall_cost)

    # -- translation ------------------------------------------------------
    def discover_block(self, pc):
        mv = self.mv
        raw = []
        va = pc
        term = "fallthrough"
        while len(raw) < self.cfg.max_bb_insts:
            try:
                word = mv.read(va, 8, "fetch")
                ins = decode(word, va)
            except GuestFault:
                if not raw:
                    raise
                break
            raw.append(word)
            va += 8
            op = ins.op
            if op in BRANCHES or op == OP_SIGRET:
                term = "branch"
                break
            if op == OP_SYS:
                term = "syscall-stub"
                break
            if op in ILLEGAL_IN_ENCLAVE:
                term = "illegal-stub"
                break
        blk = BasicBlock(pc, [], term, 8 * (len(raw) + 1))
        self.cache.insert(blk)
        # emit into the cache, then run what the cache holds
        self.machine.write("engine", blk.cache_va, b"".join(raw) + _EXIT_STUB)
        code = self.machine.read("engine", blk.cache_va, 8 * len(raw), "fetch")
        blk.instrs = [decode(code[i:i + 8], pc + i) for i in range(0, len(code), 8)]
        if self.cfg.loglevel >= 3:
            log.debug("block %#x: %d instrs, %s, cache %#x", pc, len(raw), term, blk.cache_va)
        return blk

    # -- execution --------------------------------------------------------
    def run_slice(self, vt, budget):
        ctx = vt.ctx
        mv = self.mv
        cache = self.cache
        n = 0
        self._unticked = 0
        try:
            while n < budget:
                cur = vt.cursor
                if cur is not None and cur[2] == cache.gen and cur[0].orig_start + 8 * cur[1] == ctx.pc:
                    blk, i = cur[0], cur[1]
                else:
                    blk = cache.blocks.get(ctx.pc)
                    if blk is None:
                        blk = self.discover_block(ctx.pc)
                    i = 0
                    cache.enter(blk)
                instrs = blk.instrs
                count = len(instrs)
                while i < count and n < budget:
                    ins = instrs[i]
                    kind = execute(ctx, ins, mv)
                    n += 1
                    i += 1
                    if kind is NEXT:
                        continue
                    vt.cursor = None
                    if kind is SYSCALL:
                        ctx.pc += 8
                        return self._slice_end(n, EV_SYSCALL, None)
                    if kind is SIGRET:
                        return self._slice_end(n, EV_SIGRET, None)
                    if kind is ILLEGAL:
                        self._illegal_stub(vt, ins, n)
                        ctx = vt.ctx
                        if self.done:
                            return self._slice_end(n, None, None)
                vt.cursor = (blk, i, cache.gen) if i < count else None
        except GuestFault as f:
            vt.cursor = None
            return self._slice_end(n, EV_FAULT, f)
        except CacheTooSmall as e:
            self.finish("fault", -1, f"CacheTooSmall: {e}")
            return self._slice_end(n, None, None)
        return self._slice_end(n, None, None)

    def _slice_end(self, n, ev, info):
        self.cache_fetches += n
        self.host.clock.tick(n - self._unticked)
        self._unticked = 0
        return n, ev, info

    def _illegal_stub(self, vt, ins, n):
        ctx = vt.ctx
        op = ins.op
        if op in (OP_RDTIME, OP_CPUINFO):
            # instructions before the stub have already happened
            self.host.clock.tick(n - 1 - self._unticked)
            self._unticked = n - 1
            name = "rdtime" if op == OP_RDTIME else "cpuinfo"
            val = self.ocall(vt, lambda: self.host.serve_insn(name))
            ctx.regs[ins.ra] = val & MASK64
        elif op == OP_WRSB0:
            ctx.sb0 = ctx.regs[ins.ra]
            vt.tls.set_bases(ctx.sb0, ctx.sb1)
        else:
            ctx.sb1 = ctx.regs[ins.ra]
            vt.tls.set_bases(ctx.sb0, ctx.sb1)
        ctx.pc += 8

    # -- scheduling hooks -----------------------------------------------------
    def start(self):
        ctx = GuestContext(pc=self.binary.entry)
        ctx.regs[15] = STACK_TOP
        vt = VThread(MAIN_TID, ctx)
        vt.tcs = self.tcsm.acquire(vt)
        self.add_thread(vt)

    def switch_out(self, old):
        if old.state == EXITED or old.tcs is None or not old.entered:
            return
        if not self.machine.tcs[old.tcs].in_enclave:
            return
        if self.machine.aex(old.tcs, "timer", old.ctx) == ABORT:
            self.finish("abort", -1, f"enclave aborted: no SSA frame to deschedule {old.tid}")
            return
        self.locks.on_switch_out(old)

    def switch_in(self, new):
        self.locks.on_switch()
        m = self.machine
        if not new.entered:
            self._first_entry(new)
        elif new.pending:
            # the host wakes the enclave so the primary handler can run
            self._ecall(new)
            new.out_entry = True
        else:
            new.ctx = m.eresume(new.tcs)
        self.locks.on_switch_in(new)

    def _first_entry(self, vt):
        self._ecall(vt)
        slots = [self.slab.alloc() for _ in range(3)]
        vt.tls = TlsList(self.machine, slots)
        vt.tls.push("engine")
        vt.tls.push("app", vt.ctx.sb0, vt.ctx.sb1)
        vt.tls_slots = slots
        vt.entered = True

    def _release_tcs(self, vt):
        if vt.tcs is None:
            return
        if vt.tls is not None:
            vt.tls.wipe()
            for va in vt.tls_slots:
                self.slab.free(va)
            vt.tls = None
        slot = vt.tcs
        self.machine.eexit(slot, final=True)
        vt.tcs = None
        granted = self.tcsm.release(slot)
        while granted is not None and granted[0].state == EXITED:
            granted = self.tcsm.release(granted[1])
        if granted is not None:
            waiter, slot = granted
            waiter.tcs = slot
            waiter.state = RUNNABLE
            self.sched.add(waiter)

    def _enclave_session(self):
        """Enter through a TCS when nothing is in enclave mode (teardown work)."""
        m = self.machine
        if m.current is not None and m.tcs[m.current].in_enclave:
            return None
        for slot in m.tcs:
            if not slot.in_enclave:
                m.eenter(slot.id)
                return slot.id
        return None

    def on_finish(self):
        m = self.machine
        if not m.aborted:
            entered = self._enclave_session()
            try:
                self.mv.sync_back()
            finally:
                if entered is not None:
                    m.eexit(entered)
        self.host.process_exit(self.public)

    # -- signals ------------------------------------------------------------
    def add_engine_handler(self, signum, fn):
        """Register an engine-owned secondary; ``fn(sigvirt, vt, signum)``."""
        entered = self._enclave_session()
        try:
            return self.registry.register("engine", signum, fn)
        finally:
            if entered is not None:
                self.machine.eexit(entered, final=True)

    def deliver(self, t, signum, origin, arrival):
        self.signals.deliver(t, signum, origin, arrival)

    def fault(self, t, f):
        self.signals.sync_exception(t, f)

    def sigret(self, t):
        if not self.signals.handle_sigret(t):
            self.fault(t, sigret_fault(t.ctx.pc))

    # -- syscalls ---------------------------------------------------------
    def syscall(self, vt):
        ctx = vt.ctx
        nr = ctx.regs[0]
        args = ctx.regs[1:7]
        spec = TABLE.get(nr)
        if spec is None:
            self.counts["unsupported"] = self.counts.get("unsupported", 0) + 1
            self.trace.syscall(vt.tid, nr, digest_bytes(nr), -ENOSYS)
            ctx.regs[0] = -ENOSYS & MASK64
            return
        self.counts[spec.name] = self.counts.get(spec.name, 0) + 1
        mv = self.mv
        try:
            in_bytes = resolve_in(spec, args, lambda va, n: mv.read(va, n, "read"))
        except GuestFault:
            return self._done(vt, spec, args, [], -EFAULT)
        except MarshalTooLarge:
            return self._done(vt, spec, args, [], -E2BIG)
        try:
            for d in spec.marshal_out:
                mv.check(args[d.arg], out_capacity(d, args), "write")
        except GuestFault:
            return self._done(vt, spec, args, in_bytes, -EFAULT)
        except MarshalTooLarge:
            return self._done(vt, spec, args, in_bytes, -E2BIG)
        handler = self._handlers.get(nr)
        if handler is None:
            ret = self.gateway.delegate(vt, spec, args)
        else:
            ret = handler(self, vt, spec, args, in_bytes)
        if ret is _BLOCKED:
            return
        if ret is _GONE:
            self.trace.syscall(vt.tid, nr, call_digest(spec, args, in_bytes), 0)
            return
        self._done(vt, spec, args, in_bytes, ret)

    def _done(self, vt, spec, args, in_bytes, ret):
        if self.cfg.loglevel >= 2:
            log.info("tid %d %s -> %d", vt.tid, spec.name, ret)
        self.trace.syscall(vt.tid, spec.number, call_digest(spec, args, in_bytes), ret)
        vt.ctx.regs[0] = ret & MASK64

    def _host_call(self, vt, spec, args):
        """A partial call's host half: marshal, OCALL, copy in, sanitize."""
        gw = self.gateway
        call = gw.marshal_out(spec, args)
        raw = gw.execute_ocall(vt, call)
        ret = gw.copy_in_then_sanitize(call, raw)
        gw.resume(call.callno)
        return ret

    def sys_fsync(self, vt, spec, args, _in):
        self.mv.sync_back()
        return self.gateway.delegate(vt, spec, args)

    def sys_mmap(self, vt, spec, args, _in):
        addr, length, prot, flags, fd, offset = args
        gw = self.gateway
        call = gw.marshal_out(spec, args)
        raw = gw.execute_ocall(vt, call)
        ret = gw.copy_in_then_sanitize(call, raw)
        if ret >= 0 and raw >= 0:
            is_file = not flags & MAP_ANON
            try:
                self.mv.install_mmap(ret, length, prot & PROT_ALL, flags, fd, offset,
                                     bool(flags & MAP_SHARED), is_file)
            except LayoutReject as r:
                gw.rejects.append(("mmap", r.reason))
                ret = -EFAULT
            except OutOfReservedMemory:
                self.ocall(vt, lambda: self.host.serve(SYS_MUNMAP, [ret, length], self.public, vt.tid))
                ret = -ENOMEM
        gw.resume(call.callno)
        return ret

    def sys_munmap(self, vt, spec, args, _in):
        addr, length = args[0], args[1]
        if addr % PAGE or length == 0:
            return -EINVAL
        lo, hi = addr, addr + page_up(length)
        if self.mv.has_twin(lo, hi):
            self.mv.sync_back(lo, hi)
            ret = self._host_call(vt, spec, args)
            if ret < 0:
                return ret
        self.mv.remove(lo, hi)
        return 0

    def sys_mprotect(self, vt, spec, args, _in):
        addr, length, prot = args[0], args[1], args[2]
        if addr % PAGE or prot & ~PROT_ALL:
            return -EINVAL
        if length == 0:
            return 0
        lo, hi = addr, addr + page_up(length)
        if length > 1 << 48 or not self.mv.covered(lo, hi):
            return -ENOMEM
        twins = [(max(lo, r.orig_va), min(hi, r.end)) for r in self.mv.overlapping(lo, hi)
                 if r.public_twin_va is not None]
        try:
            self.mv.protect(lo, hi, prot)
        except StashExhausted:
            return -ENOMEM
        for a, b in twins:
            ret = self._host_call(vt, spec, [a, b - a, prot, 0, 0, 0])
            if ret < 0:
                return ret
        return 0

    def sys_brk(self, vt, spec, args, _in):
        return self.mv.brk(args[0])

    def sys_msync(self, vt, spec, args, _in):
        addr, length = args[0], args[1]
        if addr % PAGE == 0 and length < 1 << 48:
            self.mv.sync_back(addr, addr + page_up(length))
        return self._host_call(vt, spec, args)

    def sys_clone(self, vt, spec, args, in_bytes):
        rec = in_bytes[0]
        entry, stack_top, ctid, arg = (int.from_bytes(rec[i:i + 8], "little") for i in range(0, 32, 8))
        try:
            self.mv.check((stack_top - 8) & MASK64, 8, "write")
        except GuestFault:
            return -EINVAL
        if len(self.live_threads()) >= MAX_THREADS:
            return -EAGAIN
        gw = self.gateway
        adv = self.host.adversary
        call = gw.marshal_out(spec, args)
        raw = gw.execute_ocall(vt, call)
        pub_va, n = call.in_slots[0]
        if adv.mode == "clone-arg-mutate":
            adv.mutate_public(self.public, pub_va, n)
        try:
            seen = self.machine.read("engine", pub_va, n)
            if seen != rec:
                raise CloneReject("public copy of the thread arguments was modified")
        except CloneReject as r:
            gw.rejects.append(("clone", str(r)))
            self.stage.release()
            gw.resume(call.callno)
            return -EINVAL
        ret = gw.copy_in_then_sanitize(call, raw)
        gw.resume(call.callno)
        if ret < 0:
            return ret
        ctx = GuestContext(pc=entry, sb0=vt.ctx.sb0, sb1=vt.ctx.sb1)
        ctx.regs[1] = arg
        ctx.regs[15] = stack_top
        child = VThread(ret, ctx)
        child.ctid_va = ctid
        slot = self.tcsm.acquire(child)
        if slot is None:
            child.state = BLOCKED_TCS
            self.threads[child.tid] = child
        else:
            child.tcs = slot
            self.add_thread(child)
        return ret

    def sys_exit(self, vt, spec, args, _in):
        others = [t for t in self.live_threads() if t is not vt]
        self._thread_exit(vt, last=not others)
        if not self.live_threads():
            self.finish("exit", to_signed(args[0]) & 0xFF)
        return _GONE

    def _thread_exit(self, vt, last):
        if vt.ctid_va:
            try:
                self.mv.write(vt.ctid_va, bytes(8))
                rec = self.mv.find(vt.ctid_va)
                if rec is not None and rec.public_twin_va is not None:
                    twin = rec.public_twin_va + (vt.ctid_va - rec.orig_va)
                    self.machine.write("engine", twin, bytes(8))
            except GuestFault:
                pass
            self.locks.wake_word(vt.ctid_va, 1 << 31)
        if last:
            self.mv.sync_back()
        self.ocall(vt, lambda: self.host.serve(SYS_EXIT, [0], self.public, vt.tid))
        self.locks.forget(vt)
        self.thread_gone(vt)
        self._release_tcs(vt)

    def sys_exit_group(self, vt, spec, args, _in):
        self.mv.sync_back()
        self.ocall(vt, lambda: self.host.serve(SYS_EXIT_GROUP, args, self.public, vt.tid))
        # the caller's TCS goes last: wiping needs an in-enclave context
        for t in sorted(self.live_threads(), key=lambda t: t is vt):
            self.thread_gone(t)
            self._release_tcs(t)
        self.finish("exit", to_signed(args[0]) & 0xFF)
        return _GONE

    def sys_futex(self, vt, spec, args, in_bytes):
        r = self.locks.futex(vt, args[0], args[1], args[2])
        if isinstance(r, tuple) and r[0] == BLOCK:
            self._done(vt, spec, args, in_bytes, r[1])
            self.block(vt, BLOCKED_FUTEX)
            return _BLOCKED
        return r

    def sys_sigaction(self, vt, spec, args, _in):
        signum, handler = args[0], args[1]
        if signum not in SIGNAL_NAMES:
            return -EINVAL
        prev = self.registry.register("app", signum, handler,
                                      SIGSTACK_BASE + (vt.tid - MAIN_TID) * SIGSTACK_SIZE)
        self.sigactions[signum] = handler
        return prev

    def sys_archctl(self, vt, spec, args, _in):
        op, val = args[0], args[1]
        ctx = vt.ctx
        if op == ARCH_SET_SB0:
            ctx.sb0 = val
        elif op == ARCH_SET_SB1:
            ctx.sb1 = val
        elif op == ARCH_GET_SB0:
            return ctx.sb0
        elif op == ARCH_GET_SB1:
            return ctx.sb1
        else:
            return -EINVAL
        vt.tls.set_bases(ctx.sb0, ctx.sb1)
        return 0

    _handlers = {
        SYS_FSYNC: sys_fsync, SYS_MMAP: sys_mmap, SYS_MUNMAP: sys_munmap,
        SYS_MPROTECT: sys_mprotect, SYS_BRK: sys_brk, SYS_MSYNC: sys_msync,
        SYS_CLONE: sys_clone, SYS_EXIT: sys_exit, SYS_EXIT_GROUP: sys_exit_group,
        SYS_FUTEX: sys_futex, SYS_SIGACTION: sys_sigaction, SYS_ARCHCTL: sys_archctl,
    }

    # -- run --------------------------------------------------------------
    def run(self):
        try:
            return super().run()
        except EnclaveAborted as e:
            if not self.done:
                self.finish("abort", -1, f"enclave aborted: {e}")
            self.trace.retired = self.retired
            return self.result()

    def profiler_report(self):
        c = self.cache
        return {
            "retired": self.retired,
            "blocks": c.built,
            "cache_peak": c.bytes_peak,
            "cache_used": c.bytes_used,
            "trace_peak": c.trace_bytes_peak,
            "traces": len(c.traces),
            "trace_execs": c.trace_execs,
            "flushes": c.flushes,
            "invalidations": c.invalidations,
            "syscalls": dict(self.counts),
            "ocalls": self.counters["ocalls"],
            "ecalls": self.counters["ecalls"],
            "signals_delivered": self.counters.get("signals_delivered", 0),
            "signals_ignored": self.counters.get("signals_ignored", 0),
            "cache_fetches": self.cache_fetches,
            "direct_fetches": self.direct_fetches,
        }

    def stats(self):
        s = self.profiler_report()
        m = self.machine
        s.update({
            "switches": self.sched.switches,
            "vclock": self.host.clock.now,
            "tcs_peak": self.tcsm.peak,
            "aex": m.stats["aex"],
            "eenter": m.stats["eenter"],
            "eresume": m.stats["eresume"],
            "host_served": self.host.served,
            "host_private_denied": m.stats["host_private_denied"],
            "sanitize_rejects": len(self.gateway.rejects),
            "relocations": self.mv.stats["relocations"],
            "sync_backs": self.mv.stats["sync_backs"],
            "stash_peak": self.mv.stats["stash_peak"],
            "pool_peak": self.mv.stats["pool_peak"],
            "adversary": {k: v for k, v in self.host.adversary.stats.items() if v},
        })
        return s


def run_dbt(binary, host, script=None, cfg=None, test_harness=False, **kw):
    """Run ``binary`` under the engine; keyword args override RunConfig fields."""
    cfg = cfg or RunConfig()
    for k, v in kw.items():
        if k not in RunConfig.names():
            raise InvalidConfig(f"unknown run option {k!r}")
        setattr(cfg, k, v)
    return Engine(binary, host, cfg, script, test_harness).run()
