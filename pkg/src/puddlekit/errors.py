"""Exception taxonomy shared by all puddlekit layers.

Wire-facing errors carry a stable ``code`` so the daemon can map them onto
protocol error frames (see docs/wire-protocol.md).
"""


class PuddleError(Exception):
    code = 1


class IoFailure(PuddleError):
    code = 2


class CapacityNotAligned(PuddleError):
    code = 3


class OutOfBounds(PuddleError):
    code = 4


class BadSize(PuddleError):
    code = 5


class OutOfStorage(PuddleError):
    code = 6


class SpaceExhausted(PuddleError):
    code = 7


class NotAssigned(PuddleError):
    code = 8


class AlreadyAssigned(PuddleError):
    code = 9


class NoCapability(PuddleError):
    code = 10


class NotMapped(PuddleError):
    code = 11


class LogFull(PuddleError):
    code = 12


class BadTarget(PuddleError):
    code = 13


class InvalidRange(PuddleError):
    code = 14


class CorruptLog(PuddleError):
    code = 15


class PuddleNotOwned(PuddleError):
    code = 16


class NotInTransaction(PuddleError):
    code = 17


class UnwritableRange(PuddleError):
    code = 18


class NotOwner(PuddleError):
    code = 19


class AlreadyRegistered(PuddleError):
    code = 20


class PermissionDenied(PuddleError):
    code = 21


class UnknownUuid(PuddleError):
    code = 22


class InvalidAddress(PuddleError):
    code = 23


class DoubleFree(PuddleError):
    code = 24


class CorruptMetadata(PuddleError):
    code = 25


class NotInRootPuddle(PuddleError):
    code = 26


class UnknownType(PuddleError):
    code = 27


class WildAddress(PuddleError):
    code = 28


class ConflictingMap(PuddleError):
    code = 29


class PoolBusy(PuddleError):
    code = 30


class VersionMismatch(PuddleError):
    code = 31


class CorruptBundle(PuddleError):
    code = 32


class ProtocolError(PuddleError):
    code = 33


class LockHeld(PuddleError):
    code = 34


class DaemonUnreachable(PuddleError):
    code = 35


class ValidationMismatch(PuddleError):
    code = 36


class MissingReferenceMap(PuddleError):
    code = 37


class FrontierFault(PuddleError):
    """Access touched a reserved-but-unmapped puddle under explicit mediation.

    Carries the faulting address so the caller can resolve and retry.
    """

    code = 38

    def __init__(self, addr):
        super().__init__(f"frontier fault at 0x{addr:x}")
        self.addr = addr


_BY_CODE = {}
for _name in list(globals()):
    _obj = globals()[_name]
    if isinstance(_obj, type) and issubclass(_obj, PuddleError):
        _BY_CODE[_obj.code] = _obj


def error_for_code(code: int, message: str = "") -> PuddleError:
    cls = _BY_CODE.get(code, PuddleError)
    return cls(message)
