"""Reference world: runs a guest binary directly in flat process memory.

No enclave, no translation. Syscalls are handled Linux-style by a small
in-process kernel backed by the same host service the enclave world uses,
and instructions that are illegal in an enclave simply execute.
"""
from collections import deque

from .abi import (ARCH_GET_SB0, ARCH_GET_SB1, ARCH_SET_SB0, ARCH_SET_SB1, CPU_ID,
                  E2BIG, EAGAIN, EFAULT, EINVAL, ENOMEM, ENOSYS, EPERM, FAULT_SIGNAL,
                  FUTEX_LOCK, FUTEX_UNLOCK, FUTEX_WAIT, FUTEX_WAKE, MAIN_TID, MASK64,
                  MAX_THREADS, PAGE, PROT_ALL, PROT_EXEC, PROT_READ, PROT_WRITE,
                  SIGFRAME_SIZE, SIGNAL_NAMES, SIGNALS, SIGSTACK_BASE, SIGSTACK_SIZE,
                  STACK_SIZE, STACK_TOP, SYS_ARCHCTL, SYS_BRK, SYS_CLONE, SYS_EXIT,
                  SYS_EXIT_GROUP, SYS_FUTEX, SYS_MMAP, SYS_MPROTECT, SYS_MSYNC, SYS_MUNMAP,
                  SYS_SIGACTION, page_up, sigstack_top, to_signed)
from .errors import GuestFault, MarshalTooLarge
from .gateway import TABLE, call_digest, out_capacity, resolve_in
from .isa import (GuestContext, ILLEGAL, NEXT, OP_CPUINFO, OP_RDTIME, OP_WRSB0, OP_WRSB1,
                  SIGRET, SYSCALL, decode, execute)
from .sched import BLOCKED_FUTEX, EV_FAULT, EV_SIGRET, EV_SYSCALL, GuestThread, World
from .trace import digest_bytes

DEFAULT_HEAP_MAX = 1 << 20
_BIT = {"read": PROT_READ, "write": PROT_WRITE, "fetch": PROT_EXEC}


class FlatMemory:
    """Page-granular process memory with Linux-like permissions."""

    def __init__(self):
        self.pages = {}
        self.decoded = {}

    def _page(self, va, access):
        e = self.pages.get(va & ~(PAGE - 1))
        if e is None or (access and not e[0] & _BIT[access]):
            raise GuestFault("memory", va, f"{access or 'access'} fault at {va:#x}")
        return e

    def read(self, va, n, access=None):
        out = bytearray()
        while n > 0:
            e = self._page(va, access)
            off = va & (PAGE - 1)
            k = min(n, PAGE - off)
            out += e[1][off:off + k]
            va += k
            n -= k
        return bytes(out)

    def write(self, va, data, access=None):
        pos = 0
        while pos < len(data):
            e = self._page(va, access)
            off = va & (PAGE - 1)
            k = min(len(data) - pos, PAGE - off)
            e[1][off:off + k] = data[pos:pos + k]
            if e[0] & PROT_EXEC:
                self.decoded.clear()
            va += k
            pos += k

    def check(self, va, n, access):
        p = va & ~(PAGE - 1)
        while p < va + n:
            self._page(max(p, va), access)
            p += PAGE

    def load(self, va, size):
        e = self.pages.get(va & ~(PAGE - 1))
        off = va & (PAGE - 1)
        if e is None or not e[0] & PROT_READ or off + size > PAGE:
            return int.from_bytes(self.read(va, size, "read"), "little")
        return int.from_bytes(e[1][off:off + size], "little")

    def store(self, va, size, value):
        e = self.pages.get(va & ~(PAGE - 1))
        off = va & (PAGE - 1)
        if e is None or not e[0] & PROT_WRITE or off + size > PAGE:
            self.write(va, value.to_bytes(size, "little"), "write")
            return
        e[1][off:off + size] = value.to_bytes(size, "little")
        if e[0] & PROT_EXEC:
            self.decoded.clear()

    def fetch(self, va):
        return self.read(va, 8, "fetch")

    def map(self, va, size, prot):
        for off in range(0, size, PAGE):
            self.pages[va + off] = [prot, bytearray(PAGE)]
        self.decoded.clear()

    def unmap(self, va, size):
        for off in range(0, size, PAGE):
            self.pages.pop(va + off, None)
        self.decoded.clear()

    def protect(self, va, size, prot):
        for off in range(0, size, PAGE):
            self.pages[va + off][0] = prot
        self.decoded.clear()

    def mapped(self, va, size):
        return all((va + off) in self.pages for off in range(0, size, PAGE))


class OracleThread(GuestThread):
    def __init__(self, tid, ctx):
        super().__init__(tid, ctx)
        self.handlers = []


class OracleWorld(World):
    name = "oracle"

    def __init__(self, binary, host, script=None, quantum=64, seed=None,
                 heap_max=DEFAULT_HEAP_MAX, max_retired=None):
        kw = {} if max_retired is None else {"max_retired": max_retired}
        super().__init__(host, script, quantum, seed, **kw)
        self.binary = binary
        self.mem = FlatMemory()
        self.heap_start = binary.image_end
        self.heap_top = self.heap_start
        self.heap_max = heap_max
        self.futex_waiters = {}
        self.mutex_waiters = {}
        self.mutex_owner = {}
        self.counts = {}

    # -- setup ------------------------------------------------------------
    def start(self):
        mem = self.mem
        for seg in self.binary.segments:
            mem.map(seg.preferred_va, page_up(seg.length), seg.perms)
            mem.write(seg.preferred_va, seg.data)
        mem.map(STACK_TOP - STACK_SIZE, STACK_SIZE, PROT_READ | PROT_WRITE)
        mem.map(SIGSTACK_BASE, MAX_THREADS * SIGSTACK_SIZE, PROT_READ | PROT_WRITE)
        ctx = GuestContext(pc=self.binary.entry)
        ctx.regs[15] = STACK_TOP
        self.add_thread(OracleThread(MAIN_TID, ctx))

    # -- execution --------------------------------------------------------
    def run_slice(self, t, budget):
        ctx = t.ctx
        mem = self.mem
        decoded = mem.decoded
        n = 0
        clock = self.host.clock
        try:
            while n < budget:
                pc = ctx.pc
                ins = decoded.get(pc)
                if ins is None:
                    ins = decode(mem.fetch(pc), pc)
                    decoded[pc] = ins
                kind = execute(ctx, ins, mem)
                if kind is NEXT:
                    n += 1
                    continue
                if kind is SYSCALL:
                    ctx.pc += 8
                    n += 1
                    clock.tick(n)
                    return n, EV_SYSCALL, None
                if kind is SIGRET:
                    n += 1
                    clock.tick(n)
                    return n, EV_SIGRET, None
                if kind is ILLEGAL:
                    op = ins.op
                    if op == OP_RDTIME:
                        ctx.regs[ins.ra] = clock.now + n
                    elif op == OP_CPUINFO:
                        ctx.regs[ins.ra] = CPU_ID
                    elif op == OP_WRSB0:
                        ctx.sb0 = ctx.regs[ins.ra]
                    elif op == OP_WRSB1:
                        ctx.sb1 = ctx.regs[ins.ra]
                    ctx.pc += 8
                    n += 1
        except GuestFault as f:
            clock.tick(n)
            return n, EV_FAULT, f
        clock.tick(n)
        return n, None, None

    # -- syscalls ---------------------------------------------------------
    def syscall(self, t):
        ctx = t.ctx
        nr = ctx.regs[0]
        args = ctx.regs[1:7]
        spec = TABLE.get(nr)
        if spec is None:
            self.trace.syscall(t.tid, nr, digest_bytes(nr), -ENOSYS)
            self._ret(t, -ENOSYS)
            return
        self.counts[spec.name] = self.counts.get(spec.name, 0) + 1
        try:
            in_bytes = resolve_in(spec, args, lambda va, n: self.mem.read(va, n, "read"))
        except GuestFault:
            return self._done(t, spec, args, [], -EFAULT)
        except MarshalTooLarge:
            return self._done(t, spec, args, [], -E2BIG)
        try:
            for d in spec.marshal_out:
                self.mem.check(args[d.arg], out_capacity(d, args), "write")
        except GuestFault:
            return self._done(t, spec, args, in_bytes, -EFAULT)
        except MarshalTooLarge:
            return self._done(t, spec, args, in_bytes, -E2BIG)
        handler = self._handlers.get(nr)
        if handler is None:
            ret = self.host.serve(nr, args, self.mem, t.tid)
        else:
            ret = handler(self, t, args, in_bytes)
        if ret is _BLOCKED:
            return
        if ret is _GONE:
            self.trace.syscall(t.tid, nr, call_digest(spec, args, in_bytes), 0)
            return
        self._done(t, spec, args, in_bytes, ret)

    def _done(self, t, spec, args, in_bytes, ret):
        self.trace.syscall(t.tid, spec.number, call_digest(spec, args, in_bytes), ret)
        self._ret(t, ret)

    def _ret(self, t, ret):
        t.ctx.regs[0] = ret & MASK64

    def _block(self, t, spec, args, in_bytes, eventual):
        self.trace.syscall(t.tid, spec.number, call_digest(spec, args, in_bytes), eventual)
        self._ret(t, eventual)
        self.block(t, BLOCKED_FUTEX)
        return _BLOCKED

    def sys_mmap(self, t, args, _in):
        return self.host.serve(SYS_MMAP, args, self.mem, t.tid)

    def sys_munmap(self, t, args, _in):
        addr, length = args[0], args[1]
        ret = self.host.serve(SYS_MUNMAP, args, self.mem, t.tid)
        if ret == 0:
            self.mem.unmap(addr, page_up(length))
        return ret

    def sys_mprotect(self, t, args, _in):
        addr, length, prot = args[0], args[1], args[2]
        if addr % PAGE or prot & ~PROT_ALL:
            return -EINVAL
        if length == 0:
            return 0
        size = page_up(length)
        if not self.mem.mapped(addr, size):
            return -ENOMEM
        self.mem.protect(addr, size, prot)
        return 0

    def sys_brk(self, t, args, _in):
        new = args[0]
        if new == 0 or new < self.heap_start or new > self.heap_start + self.heap_max:
            return self.heap_top
        old_end, new_end = page_up(self.heap_top), page_up(new)
        if new_end > old_end:
            self.mem.map(old_end, new_end - old_end, PROT_READ | PROT_WRITE)
        elif new_end < old_end:
            self.mem.unmap(new_end, old_end - new_end)
        self.heap_top = new
        return new

    def sys_msync(self, t, args, _in):
        return self.host.serve(SYS_MSYNC, args, self.mem, t.tid)

    def sys_clone(self, t, args, in_bytes):
        rec = in_bytes[0]
        entry, stack_top, ctid, arg = (int.from_bytes(rec[i:i + 8], "little") for i in range(0, 32, 8))
        try:
            self.mem.check(stack_top - 8, 8, "write")
        except GuestFault:
            return -EINVAL
        if len(self.live_threads()) >= MAX_THREADS:
            return -EAGAIN
        tid = self.host.serve(SYS_CLONE, args, self.mem, t.tid)
        ctx = GuestContext(pc=entry, sb0=t.ctx.sb0, sb1=t.ctx.sb1)
        ctx.regs[1] = arg
        ctx.regs[15] = stack_top
        child = OracleThread(tid, ctx)
        child.ctid_va = ctid
        self.add_thread(child)
        return tid

    def sys_exit(self, t, args, _in):
        self._thread_exit(t)
        if not self.live_threads():
            self.finish("exit", to_signed(args[0]) & 0xFF)
        return _GONE

    def sys_exit_group(self, t, args, _in):
        self.host.serve(SYS_EXIT_GROUP, args, self.mem, t.tid)
        for other in self.live_threads():
            self.thread_gone(other)
        self.finish("exit", to_signed(args[0]) & 0xFF)
        return _GONE

    def _thread_exit(self, t):
        if t.ctid_va:
            try:
                self.mem.write(t.ctid_va, bytes(8), "write")
            except GuestFault:
                pass
            self._futex_wake(t.ctid_va, 1 << 31)
        self.thread_gone(t)
        self.host.serve(SYS_EXIT, [0], self.mem, t.tid)

    def _futex_wake(self, word, n):
        q = self.futex_waiters.get(word)
        woken = 0
        while q and woken < n:
            self.wake(q.popleft(), 0)
            woken += 1
        return woken

    def sys_futex(self, t, args, in_bytes):
        word, op, val = args[0], args[1], args[2]
        spec = TABLE[SYS_FUTEX]
        try:
            self.mem.check(word, 8, "read")
            self.mem.check(word, 8, "write")
        except GuestFault:
            return -EFAULT
        cur = self.mem.load(word, 8)
        if op == FUTEX_WAIT:
            if cur != val:
                return -EAGAIN
            self.futex_waiters.setdefault(word, deque()).append(t)
            return self._block(t, spec, args, in_bytes, 0)
        if op == FUTEX_WAKE:
            return self._futex_wake(word, val)
        if op == FUTEX_LOCK:
            if cur == 0:
                self.mem.store(word, 8, 1)
                self.mutex_owner[word] = t.tid
                return 0
            self.mem.store(word, 8, 2)
            self.mutex_waiters.setdefault(word, deque()).append(t)
            return self._block(t, spec, args, in_bytes, 0)
        if op == FUTEX_UNLOCK:
            if self.mutex_owner.get(word) != t.tid:
                return -EPERM
            q = self.mutex_waiters.get(word)
            if q:
                nxt = q.popleft()
                self.mutex_owner[word] = nxt.tid
                self.mem.store(word, 8, 2 if q else 1)
                self.wake(nxt, 0)
            else:
                self.mem.store(word, 8, 0)
                del self.mutex_owner[word]
            return 0
        return -EINVAL

    def sys_sigaction(self, t, args, _in):
        signum, handler = args[0], args[1]
        if signum not in SIGNAL_NAMES:
            return -EINVAL
        prev = self.sigactions.get(signum, 0)
        self.sigactions[signum] = handler
        return prev

    def sys_archctl(self, t, args, _in):
        op, val = args[0], args[1]
        ctx = t.ctx
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
        return 0

    _handlers = {
        SYS_MMAP: sys_mmap, SYS_MUNMAP: sys_munmap, SYS_MPROTECT: sys_mprotect,
        SYS_BRK: sys_brk, SYS_MSYNC: sys_msync, SYS_CLONE: sys_clone, SYS_EXIT: sys_exit,
        SYS_EXIT_GROUP: sys_exit_group, SYS_FUTEX: sys_futex, SYS_SIGACTION: sys_sigaction,
        SYS_ARCHCTL: sys_archctl,
    }

    # -- signals ----------------------------------------------------------
    def _enter_handler(self, t, signum, handler, fault_pc):
        ctx = t.ctx
        frame = sigstack_top(t.tid) - SIGFRAME_SIZE * (len(t.handlers) + 1)
        self.mem.write(frame, b"".join(v.to_bytes(8, "little") for v in (signum, fault_pc, ctx.pc, 0)))
        t.handlers.append((ctx.copy(), frame))
        ctx.pc = handler
        ctx.regs[1] = signum
        ctx.regs[2] = frame
        ctx.regs[15] = frame
        self.trace.signal(t.tid, signum, handler, "delivered")

    def deliver(self, t, signum, origin, arrival):
        act = self.sigactions.get(signum, 0)
        if act > 1:
            self._enter_handler(t, signum, act, t.ctx.pc)
        else:
            self.default_action(t, signum)

    def fault(self, t, f):
        signum = FAULT_SIGNAL[f.kind]
        act = self.sigactions.get(signum, 0)
        if act > 1:
            self._enter_handler(t, signum, act, t.ctx.pc)
            return
        self.trace.signal(t.tid, signum, 0, "default")
        self.finish("signal", 128 + signum, f"{f} (SIG{SIGNAL_NAMES[signum]})")

    def sigret(self, t):
        if not t.handlers:
            self.fault(t, GuestFault("decode", t.ctx.pc, "sigret outside a signal handler"))
            return
        saved, frame = t.handlers.pop()
        resume = int.from_bytes(self.mem.read(frame + 16, 8), "little")
        t.ctx = saved
        t.ctx.pc = resume

    def on_finish(self):
        self.host.process_exit(self.mem)

    def stats(self):
        return {"retired": self.retired, "syscalls": dict(self.counts),
                "switches": self.sched.switches, "vclock": self.host.clock.now}


_BLOCKED = object()
_GONE = object()


def interpret(binary, host, script=None, **kw):
    """Run ``binary`` directly and return its :class:`RunResult`."""
    return OracleWorld(binary, host, script, **kw).run()


__all__ = ["FlatMemory", "OracleWorld", "interpret", "SIGNALS"]
