"""Guest ABI constants: syscall numbers, errno values, signals and the
fixed guest virtual-address layout shared by the oracle and the engine."""

PAGE = 4096
MASK64 = (1 << 64) - 1


def page_down(va):
    return va & ~(PAGE - 1)


def page_up(va):
    return (va + PAGE - 1) & ~(PAGE - 1)


def to_signed(v):
    v &= MASK64
    return v - (1 << 64) if v >> 63 else v


# syscall numbers (Linux x86_64 numbering where an analog exists)
SYS_READ = 0
SYS_WRITE = 1
SYS_OPEN = 2
SYS_CLOSE = 3
SYS_MMAP = 9
SYS_MPROTECT = 10
SYS_MUNMAP = 11
SYS_BRK = 12
SYS_SIGACTION = 13
SYS_MSYNC = 26
SYS_GETPID = 39
SYS_CLONE = 56
SYS_FORK = 57
SYS_EXIT = 60
SYS_FSYNC = 74
SYS_ARCHCTL = 158
SYS_FUTEX = 202
SYS_GETTIME = 228
SYS_EXIT_GROUP = 231

# errno
EPERM = 1
ENOENT = 2
EIO = 5
E2BIG = 7
EBADF = 9
EAGAIN = 11
ENOMEM = 12
EACCES = 13
EFAULT = 14
EEXIST = 17
EINVAL = 22
EMFILE = 24
ENOSYS = 38
MAX_ERRNO = 4095

# mmap / mprotect
PROT_NONE = 0
PROT_READ = 1
PROT_WRITE = 2
PROT_EXEC = 4
PROT_ALL = 7
MAP_SHARED = 0x01
MAP_PRIVATE = 0x02
MAP_FIXED = 0x10
MAP_ANON = 0x20

# open flags
O_RDONLY = 0
O_WRONLY = 1
O_RDWR = 2
O_ACCMODE = 3
O_CREAT = 0x40
O_TRUNC = 0x200
O_APPEND = 0x400

# futex ops
FUTEX_WAIT = 0
FUTEX_WAKE = 1
FUTEX_LOCK = 6
FUTEX_UNLOCK = 7
FUTEX_WAKE_ALL = 0x7FFFFFFF

# archctl ops
ARCH_SET_SB1 = 0x1001
ARCH_SET_SB0 = 0x1002
ARCH_GET_SB0 = 0x1003
ARCH_GET_SB1 = 0x1004

# signals
SIGILL = 4
SIGFPE = 8
SIGUSR1 = 10
SIGSEGV = 11
SIGUSR2 = 12
SIGALRM = 14
SIGTERM = 15
SIGCHLD = 17
SIGNALS = {
    "ILL": SIGILL, "FPE": SIGFPE, "USR1": SIGUSR1, "SEGV": SIGSEGV,
    "USR2": SIGUSR2, "ALRM": SIGALRM, "TERM": SIGTERM, "CHLD": SIGCHLD,
}
SIGNAL_NAMES = {v: k for k, v in SIGNALS.items()}
SIG_DFL = 0
SIG_IGN = 1
# default action per signal: True = terminate, False = ignore
DEFAULT_TERMINATE = {
    SIGILL: True, SIGFPE: True, SIGSEGV: True, SIGUSR1: True,
    SIGUSR2: True, SIGTERM: True, SIGALRM: True, SIGCHLD: False,
}
FAULT_SIGNAL = {"div0": SIGFPE, "decode": SIGILL, "memory": SIGSEGV, "isolation": SIGSEGV}

# process identity
PID = 1000
MAIN_TID = 1000
CPU_ID = 0x47495341  # "GISA"

# guest (original) address layout, identical in both execution worlds
CODE_DEFAULT = 0x0040_0000
STACK_TOP = 0x0080_0000
STACK_SIZE = 0x1_0000
SIGSTACK_BASE = 0x0090_0000
SIGSTACK_SIZE = 0x4000
MAX_THREADS = 64
MMAP_BASE = 0x2000_0000
MMAP_LIMIT = 0x2800_0000
# signal frame handed to handlers: signum, fault_pc, resume_pc (8 bytes each)
SIGFRAME_SIZE = 32


def sigstack_top(tid):
    return SIGSTACK_BASE + (tid - MAIN_TID + 1) * SIGSTACK_SIZE
