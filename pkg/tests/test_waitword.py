"""
Tests for futex-style wait words: mode rules and the no-lost-wakeup property.
"""

import itertools
import threading

import pytest

from domainbus.errors import ContextViolation
from domainbus.waitword import (
    NotifyCount,
    WaitOutcome,
    WaitWord,
    notify,
    prepare_wait,
    wait_outside,
)


@pytest.fixture
def lib_ctx(runtime):
    ctx = runtime.new_context(runtime.register_process(), trusted=True)
    runtime.enter_library(ctx)
    return ctx


@pytest.mark.unit
class TestModeRules:
    """Test which side of the trampoline each step may run on."""

    def test_prepare_requires_library(self, app_ctx):
        with pytest.raises(ContextViolation):
            prepare_wait(app_ctx, WaitWord())

    def test_notify_requires_library(self, app_ctx):
        with pytest.raises(ContextViolation):
            notify(app_ctx, WaitWord())

    def test_wait_rejected_inside_library(self, lib_ctx):
        directive = prepare_wait(lib_ctx, WaitWord())
        with pytest.raises(ContextViolation):
            wait_outside(lib_ctx, directive, 0)

    def test_directive_single_use(self, lib_ctx, app_ctx):
        word = WaitWord()
        directive = prepare_wait(lib_ctx, word)
        notify(lib_ctx, word)
        assert wait_outside(app_ctx, directive, 0) is WaitOutcome.VALUE_CHANGED
        with pytest.raises(ContextViolation):
            wait_outside(app_ctx, directive, 0)


@pytest.mark.unit
class TestWaitNotify:
    """Test wake, timeout and counter behaviour."""

    def test_timeout_without_notify(self, lib_ctx, app_ctx):
        directive = prepare_wait(lib_ctx, WaitWord())
        assert wait_outside(app_ctx, directive, 1_000_000) is WaitOutcome.TIMED_OUT
        assert directive.word.waiter_count == 0

    def test_wakes_blocked_thread(self, lib_ctx, app_ctx):
        word = WaitWord()
        directive = prepare_wait(lib_ctx, word)
        outcomes = []
        waiter = threading.Thread(target=lambda: outcomes.append(wait_outside(app_ctx, directive, 5_000_000_000)))
        waiter.start()
        while word.waiter_count == 0:
            threading.Event().wait(0.001)
        assert notify(lib_ctx, word) == 1
        waiter.join(5)
        assert outcomes == [WaitOutcome.WOKEN]

    def test_counter_wraps(self, lib_ctx):
        word = WaitWord(0xFFFFFFFF)
        notify(lib_ctx, word)
        assert word.value == 0

    def test_notify_one_is_fifo(self, lib_ctx):
        word = WaitWord()
        first, second = word._arm(0), word._arm(0)
        assert notify(lib_ctx, word, NotifyCount.ONE) == 1
        assert first.event.is_set()
        assert not second.event.is_set()
        assert word.waiter_count == 1


@pytest.mark.unit
class TestNoLostWakeup:
    """Enumerate every placement of a notify around the waiter's steps."""

    @pytest.mark.parametrize("position", [0, 1, 2])
    def test_single_waiter(self, lib_ctx, position):
        # waiter steps: snapshot, arm, block; notify lands before step `position + 1`
        word = WaitWord()
        expected = word.value
        outcome = None
        waiter = None
        for step in range(3):
            if step == position:
                word._increment_and_wake(NotifyCount.ALL)
            if step == 0:
                waiter = word._arm(expected)
                if waiter is None:
                    outcome = WaitOutcome.VALUE_CHANGED
                    break
            elif step == 1:
                outcome = word._block(waiter, 0)
                break
        if position == 2 and outcome is WaitOutcome.TIMED_OUT:
            # a notify after the waiter has already given up is not a lost wakeup
            return
        assert outcome in (WaitOutcome.VALUE_CHANGED, WaitOutcome.WOKEN)

    def test_all_interleavings_two_waiters(self):
        # events: a waiter arms (A/B) or a notifier fires (N); every order is tried
        for order in set(itertools.permutations("ABN")):
            word = WaitWord()
            expected = word.value
            armed = {}
            for event in order:
                if event == "N":
                    word._increment_and_wake(NotifyCount.ALL)
                else:
                    armed[event] = word._arm(expected)
            for name, waiter in armed.items():
                if waiter is None:
                    continue  # saw the new value, never blocked
                assert word._block(waiter, 0) is WaitOutcome.WOKEN, (order, name)
            assert word.waiter_count == 0
