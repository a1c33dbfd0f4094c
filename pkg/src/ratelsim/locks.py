"""In-enclave synchronization.

Futex wait/wake and the three-state mutex are served entirely inside the
enclave by a lock manager whose state transitions are serialized by the
hardware spinlock. Two deliberately broken designs are kept as test foils:
a lock word living in public memory, and a naive private/public two-copy
word. Both can only be built from the test harness.
"""
import re
from collections import deque
from dataclasses import dataclass

from .abi import (EAGAIN, EFAULT, EINVAL, EPERM, FUTEX_LOCK, FUTEX_UNLOCK, FUTEX_WAIT,
                  FUTEX_WAKE, PAGE)
from .errors import GuestFault, InvalidConfig, RatelError, UnlockNotOwner

SYNC_MODES = ("manager", "insecure-public-futex", "insecure-two-copy")
INSECURE_MODES = SYNC_MODES[1:]
PUBLIC_LOCK_BASE = 0x3800_0000
BLOCK = "block"


class LockObject:
    __slots__ = ("word", "actual", "meta_va", "waiters", "owner", "holders", "pub_va", "copy")

    def __init__(self, word, actual, meta_va):
        self.word = word
        self.actual = actual
        self.meta_va = meta_va
        self.waiters = deque()   # futex waiters
        self.owner = None        # mutex owner tid
        self.holders = set()
        self.pub_va = 0
        self.copy = 0


class LockManager:
    """Futex and mutex service for one engine.

    ``engine`` must offer ``machine``, ``mv`` (app memory views), ``slab``,
    ``host`` and ``wake_thread(vt)``.
    """

    def __init__(self, engine, mode="manager", test_harness=False):
        if mode not in SYNC_MODES:
            raise InvalidConfig(f"unknown sync mode {mode!r}")
        if mode in INSECURE_MODES and not test_harness:
            raise InvalidConfig(f"{mode} is only available to the test harness")
        self.e = engine
        self.mode = mode
        self.guard_va = engine.slab.alloc()
        self.locks = {}
        self.mutex_q = {}
        self.max_in_section = 0
        self.divergences = 0
        self.ocalls_during = 0
        self.stats = {"wait": 0, "wake": 0, "lock": 0, "unlock": 0, "blocked": 0, "eagain": 0}
        self._next_pub = PUBLIC_LOCK_BASE

    # -- plumbing ---------------------------------------------------------
    def _guarded(self, fn):
        m = self.e.machine
        if not m.hw_spinlock(self.guard_va, "acquire"):
            raise RatelError("lock manager guard held across a dispatch step")
        try:
            return fn()
        finally:
            m.hw_spinlock(self.guard_va, "release")

    def _obj(self, word):
        mv = self.e.mv
        mv.check(word, 8, "read")
        mv.check(word, 8, "write")
        actual = mv.xlat(word, "write")
        if not self.e.machine.is_private(actual):
            raise GuestFault("memory", word, "lock word outside the enclave")
        obj = self.locks.get(word)
        if obj is None:
            obj = LockObject(word, actual, self.e.slab.alloc())
            if self.mode in INSECURE_MODES:
                self._attach_public(obj)
            self.locks[word] = obj
        elif obj.actual != actual:
            # the page was relocated; waiters and ownership move with it
            obj.actual = actual
        return obj

    def _attach_public(self, obj):
        m = self.e.machine
        obj.pub_va = self._next_pub
        self._next_pub += 8
        m.map_public(obj.pub_va & ~(PAGE - 1), PAGE)
        val = self.e.mv.load(obj.word, 8)
        m.write_u64("engine", obj.pub_va, val)
        obj.copy = val

    def _meta(self, obj):
        self.e.slab.store(obj.meta_va, obj.word, obj.actual, obj.owner or 0,
                          len(obj.waiters), len(obj.holders))

    def _get(self, obj):
        if self.mode == "insecure-public-futex":
            return self.e.machine.read_u64("engine", obj.pub_va)
        if self.mode == "insecure-two-copy":
            return obj.copy
        return self.e.mv.load(obj.word, 8)

    def _set(self, obj, val):
        if self.mode == "insecure-public-futex":
            self.e.machine.write_u64("engine", obj.pub_va, val)
        elif self.mode == "insecure-two-copy":
            obj.copy = val
        # the app-visible word always follows the manager's view
        self.e.mv.store(obj.word, 8, val)

    def _enter(self, obj, tid):
        obj.holders.add(tid)
        self.max_in_section = max(self.max_in_section, len(obj.holders))

    # -- futex ------------------------------------------------------------
    def futex(self, vt, word, op, val):
        """Returns an int result or (BLOCK, eventual_ret)."""
        try:
            obj = self._obj(word)
        except GuestFault:
            return -EFAULT
        return self._guarded(lambda: self._op(vt, obj, op, val))

    def _op(self, vt, obj, op, val):
        cur = self._get(obj)
        if op == FUTEX_WAIT:
            self.stats["wait"] += 1
            if cur != val:
                self.stats["eagain"] += 1
                return -EAGAIN
            obj.waiters.append(vt)
            self.stats["blocked"] += 1
            self._meta(obj)
            return BLOCK, 0
        if op == FUTEX_WAKE:
            self.stats["wake"] += 1
            n = self._wake(obj, val)
            self._meta(obj)
            return n
        if op == FUTEX_LOCK:
            self.stats["lock"] += 1
            if cur == 0:
                self._set(obj, 1)
                obj.owner = vt.tid
                self._enter(obj, vt.tid)
                self._meta(obj)
                return 0
            self._set(obj, 2)
            self.mutex_q.setdefault(obj.word, deque()).append(vt)
            self.stats["blocked"] += 1
            self._meta(obj)
            return BLOCK, 0
        if op == FUTEX_UNLOCK:
            self.stats["unlock"] += 1
            try:
                self._unlock(vt, obj)
            except UnlockNotOwner:
                return -EPERM
            self._meta(obj)
            return 0
        return -EINVAL

    def _wake(self, obj, n):
        woken = 0
        while obj.waiters and woken < n:
            self.e.wake_thread(obj.waiters.popleft())
            woken += 1
        return woken

    def _unlock(self, vt, obj):
        if self.mode == "manager":
            if obj.owner != vt.tid:
                raise UnlockNotOwner(f"thread {vt.tid} does not own {obj.word:#x}")
        elif vt.tid not in obj.holders:
            raise UnlockNotOwner(f"thread {vt.tid} does not hold {obj.word:#x}")
        obj.holders.discard(vt.tid)
        q = self.mutex_q.get(obj.word)
        if q:
            nxt = q.popleft()
            obj.owner = nxt.tid
            self._set(obj, 2 if q else 1)
            self._enter(obj, nxt.tid)
            self.e.wake_thread(nxt)
        else:
            obj.owner = None
            self._set(obj, 0)

    def wake_word(self, word, n):
        """Wake futex waiters on ``word`` (used by thread exit)."""
        obj = self.locks.get(word)
        if obj is None:
            return 0
        return self._guarded(lambda: self._wake(obj, n))

    def forget(self, vt):
        for obj in self.locks.values():
            obj.holders.discard(vt.tid)

    # -- context switch hooks (adversary and insecure protocols) ------------
    def on_switch_out(self, vt):
        if self.mode == "insecure-two-copy":
            for obj in self.locks.values():
                self.e.machine.write_u64("engine", obj.pub_va, obj.copy)

    def on_switch(self):
        adv = self.e.host.adversary
        if adv.mode != "lockword-flip":
            return
        m = self.e.machine
        for obj in self.locks.values():
            if self.mode == "manager":
                adv.attack_private(m, obj.actual)
            else:
                m.write_u64("host", obj.pub_va, 0)
                adv.stats["lock_flips"] += 1

    def on_switch_in(self, vt):
        if self.mode == "insecure-two-copy":
            for obj in self.locks.values():
                pub = self.e.machine.read_u64("engine", obj.pub_va)
                if pub != obj.copy:
                    self.divergences += 1
                obj.copy = pub


@dataclass
class ViolationReport:
    violated: bool
    max_in_section: int
    final_counter: int
    divergences: int


_COUNTER = re.compile(rb"counter=(\d+)")


def insecure_baseline_demo(mode, workload, seed=None, quantum=64, expected=None):
    """Run a guarded-increment workload with the lock-word flipping adversary.

    ``workload`` is a GuestBinary that prints ``counter=N``. Mutual exclusion
    counts as violated when two threads were ever inside the critical
    section together or the final counter differs from ``expected``.
    """
    from .host import AdversaryPolicy, Host
    from .translator import Engine, RunConfig

    host = Host(adversary=AdversaryPolicy("lockword-flip"))
    eng = Engine(workload, host, RunConfig(quantum=quantum, seed=seed, sync_mode=mode),
                 test_harness=True)
    res = eng.run()
    m = _COUNTER.search(res.stdout)
    counter = int(m.group(1)) if m else -1
    lm = eng.locks
    violated = lm.max_in_section > 1 or (expected is not None and counter != expected)
    return ViolationReport(violated, lm.max_in_section, counter, lm.divergences)
