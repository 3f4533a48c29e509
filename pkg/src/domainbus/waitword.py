"""
Futex-style wait words.

A library call never blocks. When it needs to wait it snapshots a wait word
(prepare_wait), returns the directive across the trampoline, and the thread
blocks in wait_outside while in Application mode. notify increments the word
and releases queued waiters. Compare-and-enqueue and increment-and-wake are
both done under the word's lock, so no wakeup is lost.

Spurious wakeups are allowed: callers loop on their real condition.
"""

import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from .errors import ContextViolation
from .runtime import DomainContext, Mode

WORD_MASK = 0xFFFFFFFF


class WaitOutcome(Enum):
    WOKEN = "woken"
    VALUE_CHANGED = "value_changed"
    TIMED_OUT = "timed_out"


class NotifyCount(Enum):
    ONE = "one"
    ALL = "all"


class _Waiter:
    __slots__ = ("event",)

    def __init__(self) -> None:
        self.event = threading.Event()


class WaitWord:
    """32-bit wrapping counter with a FIFO queue of blocked waiters."""

    def __init__(self, value: int = 0, wake_cost_ns: int = 0):
        self._value = value & WORD_MASK
        self._lock = threading.Lock()
        self._waiters: deque[_Waiter] = deque()
        self.wake_cost_ns = wake_cost_ns

    @property
    def value(self) -> int:
        return self._value

    @property
    def waiter_count(self) -> int:
        with self._lock:
            return len(self._waiters)

    # The two halves of wait_outside, kept separate so interleavings can be
    # enumerated step by step.
    def _arm(self, expected: int) -> _Waiter | None:
        with self._lock:
            if self._value != expected:
                return None
            waiter = _Waiter()
            self._waiters.append(waiter)
            return waiter

    def _block(self, waiter: _Waiter, timeout_s: float | None) -> WaitOutcome:
        if waiter.event.wait(timeout_s):
            return WaitOutcome.WOKEN
        with self._lock:
            try:
                self._waiters.remove(waiter)
            except ValueError:
                # notify dequeued us between the timeout and the lock
                return WaitOutcome.WOKEN
        return WaitOutcome.TIMED_OUT

    def _increment_and_wake(self, count: NotifyCount) -> int:
        with self._lock:
            self._value = (self._value + 1) & WORD_MASK
            n = len(self._waiters) if count is NotifyCount.ALL else min(1, len(self._waiters))
            woken = [self._waiters.popleft() for _ in range(n)]
        for waiter in woken:
            waiter.event.set()
        return len(woken)


@dataclass
class WaitDirective:
    """Instruction returned by a library call: wait on `word` while it equals `expected`."""

    word: WaitWord
    expected: int
    used: bool = field(default=False, repr=False)


def prepare_wait(ctx: DomainContext, word: WaitWord) -> WaitDirective:
    if ctx.mode is not Mode.LIBRARY:
        raise ContextViolation("prepare_wait must run inside the library")
    return WaitDirective(word=word, expected=word.value)


def wait_outside(
    ctx: DomainContext, directive: WaitDirective, timeout_ns: int | None
) -> WaitOutcome:
    """Block outside the library until the word moves past `expected`, a wake, or timeout."""
    if ctx.mode is Mode.LIBRARY:
        raise ContextViolation("wait_outside called while inside the library")
    if directive.used:
        raise ContextViolation("wait directive already consumed")
    directive.used = True

    word = directive.word
    waiter = word._arm(directive.expected)
    if waiter is None:
        return WaitOutcome.VALUE_CHANGED
    timeout_s = None if timeout_ns is None else max(0, timeout_ns) / 1e9
    outcome = word._block(waiter, timeout_s)
    if outcome is WaitOutcome.WOKEN and word.wake_cost_ns:
        busy_wait(word.wake_cost_ns)
    return outcome


def notify(ctx: DomainContext, word: WaitWord, count: NotifyCount = NotifyCount.ALL) -> int:
    if ctx.mode is not Mode.LIBRARY:
        raise ContextViolation("notify must run inside the library")
    return word._increment_and_wake(count)


def busy_wait(duration_ns: int) -> None:
    end = time.perf_counter_ns() + duration_ns
    while time.perf_counter_ns() < end:
        pass
