"""
Exception hierarchy for domainbus.

Every error a library operation can raise derives from DomainBusError so that
outer surfaces (CLI, HTTP API, daemon loop) can catch one type.
"""


class DomainBusError(Exception):
    """Base class for all domainbus errors."""


# ---------- runtime ----------
class ContextViolation(DomainBusError):
    """An operation was invoked from the wrong protection mode."""


class TimeBoundExceeded(DomainBusError):
    """A library call ran longer than the configured bound (Fail policy)."""

    def __init__(self, name: str, duration_ns: int, bound_ns: int):
        super().__init__(f"{name} took {duration_ns} ns (bound {bound_ns} ns)")
        self.name = name
        self.duration_ns = duration_ns
        self.bound_ns = bound_ns


class UnknownPid(DomainBusError):
    """The pid was never issued or is no longer alive."""


# ---------- shared heap ----------
class HeapExhausted(DomainBusError):
    pass


class StaleDescriptor(DomainBusError):
    pass


class KindMismatch(DomainBusError):
    pass


class OwnershipViolation(DomainBusError):
    pass


class UnderflowViolation(DomainBusError):
    pass


# ---------- permanent buffers ----------
class ReservationLimitExceeded(DomainBusError):
    pass


class PermissionDenied(DomainBusError):
    pass


class BlocksInUse(DomainBusError):
    pass


class BufferFull(DomainBusError):
    pass


class InvalidStateTransition(DomainBusError):
    pass


class InvalidBlock(DomainBusError):
    pass


# ---------- dds ----------
class DuplicateTopicName(DomainBusError):
    pass


class QosMismatch(DomainBusError):
    pass


class BackpressureFull(DomainBusError):
    """The reliable window or a reliable receipt queue is full; retry later."""


# ---------- wire / transport ----------
class MalformedMessage(DomainBusError):
    pass


class FragMetadataMismatch(DomainBusError):
    pass


class OversizedDatagram(DomainBusError):
    pass


# ---------- bench ----------
class EmptyInput(DomainBusError):
    pass


class IoFailure(DomainBusError):
    pass
