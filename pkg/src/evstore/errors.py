"""Exception hierarchy shared by all evstore subsystems."""


class EvStoreError(Exception):
    """Base class for every error raised by evstore."""


# catalog

class NotFound(EvStoreError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class DuplicateName(EvStoreError):
    pass


class CreationTimeout(EvStoreError):
    pass


class NotOpen(EvStoreError):
    pass


class LeaseRequired(EvStoreError):
    pass


class SequenceGap(EvStoreError):
    pass


class VersionAlreadyBound(EvStoreError):
    pass


class VersionUnbound(EvStoreError):
    pass


class Conflict(EvStoreError):
    """A live lease blocks the request; ``holder`` names who owns it."""

    def __init__(self, resource, holder):
        super().__init__(f"{resource} is held by {holder}")
        self.resource = resource
        self.holder = holder


class NotHolder(EvStoreError):
    pass


class Expired(EvStoreError):
    pass


class PermissionDenied(EvStoreError):
    pass


class ServiceStalled(EvStoreError):
    """The lock service is not answering (injected stall)."""


class InjectedCrash(EvStoreError):
    """Raised at an armed crash point to simulate process death."""

    def __init__(self, point):
        super().__init__(point)
        self.point = point


# hsm

class ChecksumMismatch(EvStoreError):
    pass


class TapeWriteFailed(EvStoreError):
    pass


class NotEvictable(EvStoreError):
    pass


class RecallFailed(EvStoreError):
    pass


class NoSuchFile(EvStoreError):
    pass


# cdr / backends

class FrameCorrupt(EvStoreError):
    pass


class BufferFull(EvStoreError):
    pass


class BackendWriteFailed(EvStoreError):
    pass


# dataserver

class RangeOutOfBounds(EvStoreError):
    pass


class NoEndpoints(EvStoreError):
    pass


class TransportError(EvStoreError):
    def __init__(self, message, retries=0):
        super().__init__(message)
        self.retries = retries


# migration / harness

class VerificationFailed(EvStoreError):
    def __init__(self, report):
        names = ", ".join(f"{m.run}:{m.event}" for m in report.mismatches[:5])
        super().__init__(f"{len(report.mismatches)} mismatching events ({names})")
        self.report = report


class InvariantViolated(EvStoreError):
    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}
