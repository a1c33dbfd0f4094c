"""Trap-and-emulate signal virtualization.

The machine knows a single handler entry, the trampoline at the enclave
entry point. Engine and app registrations are kept as secondary handlers in
private memory. A signal either arrives while the thread runs in the
enclave (AEX, then re-entry through the trampoline) or while it is outside
(the host wakes the enclave with an ECALL). Handlers may nest once, and
only when an engine handler is interrupted by a signal meant for the app;
every other nested arrival is dropped, and a third level aborts the
enclave because it would eat the SSA frame kept for the timer.
"""
from .abi import FAULT_SIGNAL, SIG_DFL, SIG_IGN, SIGFRAME_SIZE, SIGNAL_NAMES, sigstack_top
from .errors import GuestFault, UnsupportedSignal
from .machine import ABORT

OWNER_CODE = {"engine": 1, "app": 2}
DELIVERED = "delivered"
IGNORED = "ignored"
ABORTED = "aborted"


def nest_decision(depth, running, incoming):
    """Disposition of a signal for ``incoming`` while ``running``'s handler runs.

    Returns (disposition, case) where case is 1..4 for depth 1 and None
    otherwise.
    """
    if depth == 0:
        return DELIVERED, None
    if depth == 1:
        if running == "engine":
            return (DELIVERED, 1) if incoming == "app" else (IGNORED, 3)
        return (IGNORED, 2) if incoming == "engine" else (IGNORED, 4)
    return ABORTED, None


class SecondaryRegistry:
    """(owner, signum) -> handler, mirrored into region A slots."""

    def __init__(self, slab):
        self.slab = slab
        self.handlers = {}
        self.slots = {}
        self.sigstacks = {}

    def register(self, owner, signum, handler, sigstack=0):
        if signum not in SIGNAL_NAMES:
            raise UnsupportedSignal(f"signal {signum} is not supported")
        if owner not in OWNER_CODE:
            raise UnsupportedSignal(f"unknown handler owner {owner!r}")
        key = (owner, signum)
        prev = self.handlers.get(key, SIG_DFL)
        self.handlers[key] = handler
        self.sigstacks[key] = sigstack
        va = self.slots.get(key)
        if va is None:
            va = self.slots[key] = self.slab.alloc()
        pc = handler if isinstance(handler, int) else id(handler) & 0xFFFF_FFFF
        self.slab.store(va, OWNER_CODE[owner], signum, pc, sigstack)
        return prev

    def get(self, owner, signum):
        return self.handlers.get((owner, signum), SIG_DFL)

    def owner_of(self, signum):
        h = self.handlers.get(("engine", signum))
        return "engine" if callable(h) else "app"


class SignalVirt:
    """Delivery, sigreturn and sync exceptions for the engine world.

    ``engine`` provides ``machine``, ``mv``, ``trace``, ``registry``,
    ``siginfo_va(vt)``, ``finish``, ``default_action`` and ``counters``.
    """

    def __init__(self, engine):
        self.e = engine
        self.log = []
        self.matrix = []

    # -- helpers ----------------------------------------------------------
    def _count(self, key):
        c = self.e.counters
        c[key] = c.get(key, 0) + 1

    def _abort(self, vt, signum, why):
        self.e.machine.abort(why)
        self.e.trace.signal(vt.tid, signum, 0, ABORTED)
        self.e.finish("abort", -1, f"enclave aborted: {why}")
        return ABORTED

    def _primary(self, vt, signum):
        """The trampoline's job: copy the signal number to private memory."""
        va = self.e.siginfo_va(vt)
        self.e.machine.write_u64("engine", va, signum)
        return self.e.machine.read_u64("engine", va)

    # -- delivery ---------------------------------------------------------
    def deliver(self, vt, signum, origin="script", arrival="in", fault_pc=None):
        e = self.e
        owner = e.registry.owner_of(signum)
        handler = e.registry.get(owner, signum)
        out_entry = arrival == "out" and vt.out_entry
        vt.out_entry = False
        if owner == "app" and handler <= SIG_IGN:
            disp = e.default_action(vt, signum)
            if out_entry:
                self._resume_from_out(vt)
            self.log.append((vt.tid, signum, origin, arrival, disp))
            return disp
        depth = len(vt.nest)
        running = vt.nest[-1][1] if depth else None
        disp, case = nest_decision(depth, running, owner)
        if case is not None:
            self.matrix.append((case, disp))
        if disp == ABORTED:
            self.log.append((vt.tid, signum, origin, arrival, disp))
            return self._abort(vt, signum, f"signal {signum} would nest a third handler")
        if disp == IGNORED:
            self._count("signals_ignored")
            e.trace.signal(vt.tid, signum, 0, IGNORED)
            if out_entry:
                self._resume_from_out(vt)
            self.log.append((vt.tid, signum, origin, arrival, disp))
            return disp
        m = e.machine
        if out_entry:
            self._count("signals_out")
        else:
            if m.aex(vt.tcs, "signal", vt.ctx) == ABORT:
                return self._abort(vt, signum, "no free SSA frame for signal delivery")
            m.eenter(vt.tcs)
            self._count("signals_in")
        sig = self._primary(vt, signum)
        self._count("signals_delivered")
        self.log.append((vt.tid, signum, origin, arrival, DELIVERED))
        if owner == "engine":
            vt.nest.append([0, "engine", False])
            e.trace.signal(vt.tid, sig, 0, DELIVERED)
            handler(self, vt, sig)
            top = vt.nest[-1]
            if top[1] == "engine":
                vt.nest.pop()
                self._machine_return(vt)
            else:
                vt.nest[-2][2] = True
            return DELIVERED
        ctx = vt.ctx
        frame = sigstack_top(vt.tid) - SIGFRAME_SIZE * (len(vt.nest) + 1)
        fpc = ctx.pc if fault_pc is None else fault_pc
        e.mv.write(frame, b"".join(v.to_bytes(8, "little") for v in (sig, fpc, ctx.pc, 0)))
        vt.nest.append([frame, "app", False])
        ctx.pc = handler
        ctx.regs[1] = sig
        ctx.regs[2] = frame
        ctx.regs[15] = frame
        e.trace.signal(vt.tid, sig, handler, DELIVERED)
        return DELIVERED

    def _machine_return(self, vt):
        """eexit from the primary then eresume the interrupted context."""
        m = self.e.machine
        m.eexit(vt.tcs)
        return m.eresume(vt.tcs)

    def _resume_from_out(self, vt):
        m = self.e.machine
        m.eexit(vt.tcs)
        vt.ctx = m.eresume(vt.tcs)

    def handle_sigret(self, vt):
        """Returns False when the thread was not running a handler."""
        if not vt.nest or vt.nest[-1][1] != "app":
            return False
        frame, _owner, _done = vt.nest.pop()
        resume = int.from_bytes(self.e.mv.read(frame + 16, 8), "little")
        ctx = self._machine_return(vt)
        ctx.pc = resume
        while vt.nest and vt.nest[-1][1] == "engine" and vt.nest[-1][2]:
            vt.nest.pop()
            self._machine_return(vt)
        vt.ctx = ctx
        self._count("sigrets")
        return True

    def sync_exception(self, vt, fault):
        signum = FAULT_SIGNAL[fault.kind]
        e = self.e
        handler = e.registry.get("app", signum)
        if vt.nest or handler <= SIG_IGN:
            # nowhere safe to run a handler: terminate instead of re-faulting
            e.trace.signal(vt.tid, signum, 0, "default")
            e.finish("signal", 128 + signum, f"{fault} (SIG{SIGNAL_NAMES[signum]})")
            return "default"
        return self.deliver(vt, signum, "sync", "in", fault_pc=vt.ctx.pc)


def sigret_fault(pc):
    return GuestFault("decode", pc, "sigret outside a signal handler")
