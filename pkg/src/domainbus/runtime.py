"""
Protected-library execution environment.

Simulates the pieces of the kernel/hardware contract the middleware relies on:
process identity, application/library protection modes, trampoline crossings
and the bounded-time rule for library calls. "Processes" are thread groups
inside one interpreter sharing a DomainRuntime instance.
"""

import itertools
import logging
import threading
import time
from collections import deque
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum

from .errors import ContextViolation, TimeBoundExceeded, UnknownPid

logger = logging.getLogger(__name__)

DEFAULT_MAX_CALL_NS = 1_000_000


class Mode(Enum):
    APPLICATION = "application"
    LIBRARY = "library"


class ViolationAction(Enum):
    RECORD = "record"
    FAIL = "fail"


@dataclass
class ProcessIdentity:
    pid: int
    alive: bool = True


class TimeBoundPolicy:
    """Bound on library call duration and what to do when it is exceeded."""

    def __init__(
        self,
        max_call_ns: int = DEFAULT_MAX_CALL_NS,
        violation_action: ViolationAction | str = ViolationAction.RECORD,
    ):
        if max_call_ns <= 0:
            raise ValueError(f"max_call_ns must be > 0, got {max_call_ns}")
        self.max_call_ns = int(max_call_ns)
        self.violation_action = ViolationAction(violation_action)


@dataclass(frozen=True)
class CallToken:
    context_id: int
    serial: int
    started_cpu_ns: int
    started_wall_ns: int


@dataclass(frozen=True)
class CallReport:
    name: str
    duration_ns: int
    wall_ns: int
    violated: bool


@dataclass
class DomainContext:
    """Per-thread protection state. Never shared between threads."""

    identity: ProcessIdentity
    context_id: int
    trusted: bool = False
    mode: Mode = Mode.APPLICATION
    call_start: int = 0
    crossings: int = 0
    busy_ns: int = 0
    _pending: CallToken | None = field(default=None, repr=False)
    _serial: int = field(default=0, repr=False)

    @property
    def pid(self) -> int:
        return self.identity.pid

    @property
    def in_library(self) -> bool:
        return self.mode is Mode.LIBRARY


class DomainRuntime:
    """
    Process registry plus the trampoline between application and library modes.

    Thread safe for registration and violation accounting; each DomainContext
    belongs to exactly one thread.
    """

    def __init__(self, policy: TimeBoundPolicy | None = None):
        self.policy = policy or TimeBoundPolicy()
        self._lock = threading.Lock()
        self._next_pid = itertools.count(1)
        self._next_context = itertools.count(1)
        self._processes: dict[int, ProcessIdentity] = {}
        self._terminations: deque[int] = deque()
        self._violations: list[CallReport] = []
        self.completed_calls = 0

    # ---------- process identity ----------
    def register_process(self) -> ProcessIdentity:
        with self._lock:
            identity = ProcessIdentity(pid=next(self._next_pid))
            self._processes[identity.pid] = identity
        logger.debug(f"registered pid {identity.pid}")
        return identity

    def deregister_process(self, pid: int) -> None:
        """Mark pid dead and queue it for resource reclamation."""
        with self._lock:
            identity = self._processes.get(pid)
            if identity is None or not identity.alive:
                raise UnknownPid(f"pid {pid} is not a live process")
            identity.alive = False
            self._terminations.append(pid)
        logger.info(f"💀 pid {pid} terminated; queued for reclamation")

    def is_alive(self, pid: int) -> bool:
        identity = self._processes.get(pid)
        return identity is not None and identity.alive

    def issued_pids(self) -> list[int]:
        with self._lock:
            return list(self._processes)

    def pop_terminations(self) -> list[int]:
        with self._lock:
            dead = list(self._terminations)
            self._terminations.clear()
        return dead

    def new_context(self, identity: ProcessIdentity, trusted: bool = False) -> DomainContext:
        if not self.is_alive(identity.pid):
            raise UnknownPid(f"pid {identity.pid} is not a live process")
        return DomainContext(identity=identity, context_id=next(self._next_context), trusted=trusted)

    @staticmethod
    def current_process(ctx: DomainContext) -> ProcessIdentity:
        return ctx.identity

    # ---------- trampoline ----------
    def enter_library(self, ctx: DomainContext) -> CallToken:
        if ctx.mode is Mode.LIBRARY:
            raise ContextViolation("reentrant library crossing")
        ctx._serial += 1
        token = CallToken(
            context_id=ctx.context_id,
            serial=ctx._serial,
            started_cpu_ns=time.thread_time_ns(),
            started_wall_ns=time.monotonic_ns(),
        )
        ctx._pending = token
        ctx.mode = Mode.LIBRARY
        ctx.call_start = token.started_wall_ns
        if not ctx.trusted:
            ctx.crossings += 1
        return token

    def exit_library(self, ctx: DomainContext, token: CallToken, name: str = "call") -> CallReport:
        if ctx.mode is not Mode.LIBRARY or ctx._pending != token:
            raise ContextViolation("exit_library token does not match the pending call")
        duration = time.thread_time_ns() - token.started_cpu_ns
        wall = time.monotonic_ns() - token.started_wall_ns
        ctx._pending = None
        ctx.mode = Mode.APPLICATION
        ctx.busy_ns += duration

        violated = duration > self.policy.max_call_ns
        report = CallReport(name=name, duration_ns=duration, wall_ns=wall, violated=violated)
        with self._lock:
            self.completed_calls += 1
            if violated:
                self._violations.append(report)
        if violated:
            logger.warning(
                f"⏱️ {name} exceeded time bound: {duration} ns > {self.policy.max_call_ns} ns"
            )
            if self.policy.violation_action is ViolationAction.FAIL:
                raise TimeBoundExceeded(name, duration, self.policy.max_call_ns)
        return report

    @contextmanager
    def library_call(self, ctx: DomainContext, name: str) -> Iterator[CallToken]:
        """Run the body in Library mode; the crossing is always closed."""
        token = self.enter_library(ctx)
        try:
            yield token
        finally:
            self.exit_library(ctx, token, name)

    # ---------- guards and accounting ----------
    @staticmethod
    def require_mode(ctx: DomainContext, mode: Mode, what: str) -> None:
        if ctx.mode is not mode:
            raise ContextViolation(f"{what} requires {mode.value} mode")

    @property
    def violation_count(self) -> int:
        with self._lock:
            return len(self._violations)

    def violations(self) -> list[CallReport]:
        with self._lock:
            return list(self._violations)
