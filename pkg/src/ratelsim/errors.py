"""Exception hierarchy shared by the machine model, the engine and the CLI."""


class RatelError(Exception):
    """Base class for every error raised by this package."""


# -- machine faults -----------------------------------------------------------

class MachineFault(RatelError):
    pass


class InvalidConfig(MachineFault):
    pass


class PostInitMutation(MachineFault):
    pass


class DoubleMapFault(MachineFault):
    pass


class SharingFault(DoubleMapFault):
    """A frame owned by one enclave was offered to another one."""


class OutOfEpc(MachineFault):
    pass


class IncompleteLayout(MachineFault):
    pass


class InvalidEntryFault(MachineFault):
    pass


class BusyTcs(MachineFault):
    pass


class AccessFault(MachineFault):
    def __init__(self, va, who="", msg=""):
        self.va = va
        self.who = who
        super().__init__(msg or f"{who} access to {va:#x} denied")


class PermFault(MachineFault):
    def __init__(self, va, kind="", msg=""):
        self.va = va
        self.kind = kind
        super().__init__(msg or f"{kind} at {va:#x} violates page permissions")


class EnclaveAborted(MachineFault):
    pass


# -- guest level ------------------------------------------------------------

class GuestFault(RatelError):
    """A fault raised while executing guest code.

    ``kind`` is one of ``decode``, ``memory``, ``div0``, ``isolation``.
    """

    def __init__(self, kind, va=0, msg=""):
        self.kind = kind
        self.va = va
        super().__init__(msg or f"guest {kind} fault at {va:#x}")


class ParseError(RatelError):
    def __init__(self, msg, line=0, col=0):
        self.line = line
        self.col = col
        super().__init__(f"line {line}, col {col}: {msg}")


class UndefinedLabel(ParseError):
    pass


class BinaryFormatError(RatelError):
    pass


# -- engine -----------------------------------------------------------------

class UnmappedFault(GuestFault):
    def __init__(self, va, msg=""):
        super().__init__("memory", va, msg or f"unmapped address {va:#x}")


class IsolationFault(GuestFault):
    def __init__(self, va, msg=""):
        super().__init__("isolation", va, msg or f"app access to engine memory {va:#x}")


class SoftPermFault(GuestFault):
    def __init__(self, va, access):
        self.access = access
        super().__init__("memory", va, f"{access} at {va:#x} denied by logical permissions")


class OverlapError(RatelError):
    pass


class CacheTooSmall(RatelError):
    pass


class MarshalTooLarge(RatelError):
    pass


class SanitizeReject(RatelError):
    def __init__(self, reason):
        self.reason = reason
        super().__init__(reason)


class LayoutReject(SanitizeReject):
    pass


class UnsupportedSyscall(RatelError):
    pass


class OutOfReservedMemory(RatelError):
    pass


class StashExhausted(RatelError):
    pass


class CloneReject(RatelError):
    pass


class ListOverflow(RatelError):
    pass


class UnlockNotOwner(RatelError):
    pass


class UnsupportedSignal(RatelError):
    pass


class ScriptError(RatelError):
    pass
