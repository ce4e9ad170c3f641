"""Exception hierarchy shared across the package."""


class CxlPoolError(Exception):
    """Base class for all errors raised by cxlpool."""


# topology
class SingleLinkTooNarrow(CxlPoolError):
    pass


class UnknownHost(CxlPoolError, KeyError):
    pass


# shmem
class OutOfPoolMemory(CxlPoolError):
    pass


class OutOfBounds(CxlPoolError, IndexError):
    pass


# channel
class PayloadTooLarge(CxlPoolError, ValueError):
    pass


class WouldBlock(CxlPoolError):
    pass


class CorruptSlot(CxlPoolError):
    pass


# simcore
class LivelockDetected(CxlPoolError):
    pass


# datapath
class NotAssigned(CxlPoolError):
    pass


class RingFull(CxlPoolError):
    pass


class DeviceFailed(CxlPoolError):
    pass


class ChannelDown(CxlPoolError):
    pass


# orchestrator
class NoDeviceAvailable(CxlPoolError):
    def __init__(self, message="no healthy device available", orphaned=()):
        super().__init__(message)
        self.orphaned = tuple(orphaned)


class UnknownDevice(CxlPoolError, KeyError):
    pass


class DuplicateHost(CxlPoolError):
    pass


class HostNotActive(CxlPoolError):
    pass


# stranding
class DomainError(CxlPoolError, ValueError):
    pass


class EmptyCatalog(CxlPoolError, ValueError):
    pass


# scenario / cli
class ParseError(CxlPoolError):
    pass


class ValidationError(CxlPoolError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


class DeviceQuiesced(RingFull):
    """The device is draining for a migration; retry after it switches."""
