"""Deterministic scheduling shared by the direct interpreter and the engine.

Both worlds drive guest threads through :class:`World.run`, so given the
same quantum, seed and script they preempt at identical retired-instruction
counts. Preemption is checked per instruction; script triggers fire at the
instruction boundary where the global retired count reaches their value.
"""
import random
from collections import deque

from .abi import DEFAULT_TERMINATE, SIG_DFL, SIG_IGN, SIGNAL_NAMES
from .errors import InvalidConfig
from .host import EventScript
from .trace import ObservableTrace, RunResult

RUNNABLE = "runnable"
BLOCKED_FUTEX = "blocked-futex"
BLOCKED_TCS = "blocked-tcs"
EXITED = "exited"

DEFAULT_QUANTUM = 64
DEFAULT_LIMIT = 20_000_000

# run_slice outcomes
EV_SYSCALL = "syscall"
EV_FAULT = "fault"
EV_SIGRET = "sigret"


class Scheduler:
    """Round-robin over runnable threads; the head of the queue is running."""

    def __init__(self, quantum=DEFAULT_QUANTUM, seed=None):
        if quantum < 1:
            raise InvalidConfig("quantum must be at least 1")
        self.quantum = quantum
        self.rng = random.Random(seed) if seed is not None else None
        self.runq = deque()
        self.switches = 0

    def slice_len(self):
        if self.rng is None:
            return self.quantum
        return self.rng.randint(1, self.quantum)

    def head(self):
        return self.runq[0] if self.runq else None

    def add(self, t):
        self.runq.append(t)

    def remove(self, t):
        try:
            self.runq.remove(t)
        except ValueError:
            pass

    def rotate(self):
        self.runq.rotate(-1)


class GuestThread:
    def __init__(self, tid, ctx):
        self.tid = tid
        self.ctx = ctx
        self.state = RUNNABLE
        self.pending = deque()
        self.ctid_va = 0
        self.fresh = True
        self.retired = 0

    def __repr__(self):
        return f"<thread {self.tid} {self.state} pc={self.ctx.pc:#x}>"


class World:
    """Run loop; subclasses provide execution and the syscall surface."""

    name = "world"

    def __init__(self, host, script=None, quantum=DEFAULT_QUANTUM, seed=None,
                 max_retired=DEFAULT_LIMIT):
        self.host = host
        self.script = script.fresh() if script is not None else EventScript()
        self.sched = Scheduler(quantum, seed)
        self.trace = ObservableTrace()
        self.threads = {}
        self.cur = None
        self.left = 0
        self.retired = 0
        self.done = False
        self.reason = ""
        self.max_retired = max_retired
        self.sigactions = {}
        self.signal_log = []

    # -- hooks ------------------------------------------------------------
    def start(self):
        raise NotImplementedError

    def run_slice(self, t, budget):
        """Execute up to ``budget`` instructions: returns (retired, event, info)."""
        raise NotImplementedError

    def syscall(self, t):
        raise NotImplementedError

    def fault(self, t, f):
        raise NotImplementedError

    def sigret(self, t):
        raise NotImplementedError

    def deliver(self, t, signum, origin, arrival):
        raise NotImplementedError

    def switch_out(self, old):
        pass

    def switch_in(self, new):
        pass

    def on_finish(self):
        pass

    def stats(self):
        return {}

    # -- threads ----------------------------------------------------------
    def add_thread(self, t):
        self.threads[t.tid] = t
        self.sched.add(t)

    def block(self, t, state):
        t.state = state
        self.sched.remove(t)

    def wake(self, t, ret=None):
        if t.state == EXITED:
            return
        if ret is not None:
            t.ctx.regs[0] = ret & ((1 << 64) - 1)
        t.state = RUNNABLE
        self.sched.add(t)

    def live_threads(self):
        return [t for t in self.threads.values() if t.state != EXITED]

    def thread_gone(self, t):
        t.state = EXITED
        self.sched.remove(t)

    def finish(self, status, code, reason=""):
        if self.done:
            return
        self.done = True
        self.trace.status = status
        self.trace.exit_code = code
        self.reason = reason
        self.on_finish()

    # -- signals ----------------------------------------------------------
    def raise_signal(self, target, signum, origin="script"):
        t = self.cur if target is None else self.threads.get(target)
        if t is None or t.state == EXITED:
            self.trace.signal(target if target is not None else 0, signum, 0, "dropped")
            return
        if t is self.cur and t.state == RUNNABLE:
            self.deliver(t, signum, origin, "in")
        else:
            t.pending.append(signum)

    def default_action(self, t, signum, handler_pc=0):
        """Apply SIG_DFL / SIG_IGN; returns the disposition string."""
        act = self.sigactions.get(signum, SIG_DFL)
        if act == SIG_IGN or (act == SIG_DFL and not DEFAULT_TERMINATE.get(signum, True)):
            self.trace.signal(t.tid, signum, 0, "ignored")
            return "ignored"
        self.trace.signal(t.tid, signum, 0, "default")
        self.finish("signal", 128 + signum, f"killed by SIG{SIGNAL_NAMES.get(signum, signum)}")
        return "default"

    def _fire_due(self):
        for trig in self.script.due(self.retired):
            if self.done:
                return
            if trig.action == "signal":
                self.raise_signal(trig.thread, trig.arg)
            else:
                self.adversary_op(trig.arg)

    def adversary_op(self, op):
        self.host.adversary.mode = op

    # -- the loop ---------------------------------------------------------
    def _reschedule(self):
        old = self.cur
        if old is not None and old.state == RUNNABLE and self.sched.head() is old:
            self.sched.rotate()
        new = self.sched.head()
        if new is None:
            live = self.live_threads()
            if live:
                self.finish("deadlock", -1, "all live threads are blocked: " +
                            ", ".join(f"{t.tid}:{t.state}" for t in live))
            else:
                self.finish("exit", 0)
            return
        if new is not old:
            self.sched.switches += 1
            if old is not None:
                self.switch_out(old)
            self.switch_in(new)
        self.cur = new
        self.left = self.sched.slice_len()
        while new.pending and new.state == RUNNABLE and not self.done:
            self.deliver(new, new.pending.popleft(), "script", "out")

    def run(self):
        self.start()
        if not self.done:
            self._reschedule()
        while not self.done:
            self._fire_due()
            if self.done:
                break
            t = self.cur
            if t is None or t.state != RUNNABLE or self.left <= 0:
                self._reschedule()
                continue
            budget = self.left
            nxt = self.script.next_at()
            if nxt is not None:
                budget = min(budget, nxt - self.retired)
            if self.retired >= self.max_retired:
                self.finish("limit", -1, f"retired-instruction limit {self.max_retired} reached")
                break
            n, ev, info = self.run_slice(t, budget)
            self.retired += n
            t.retired += n
            self.left -= n
            if ev is None or self.done:
                continue
            if ev == EV_SYSCALL:
                self.syscall(t)
            elif ev == EV_FAULT:
                self.fault(t, info)
            elif ev == EV_SIGRET:
                self.sigret(t)
        self.trace.retired = self.retired
        return self.result()

    def result(self):
        t = self.trace
        t.stdout = bytes(self.host.vfs.stdout)
        t.stderr = bytes(self.host.vfs.stderr)
        t.files = self.host.vfs.digests()
        return RunResult(self.name, t, self.reason, self.stats())
