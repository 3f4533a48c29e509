"""
The trusted daemon.

Runs one loop per library instance that fields the time-driven and
asynchronous work no application thread is guaranteed to do: draining the RX
queue, heartbeats, flushing queued transmissions, and reclaiming resources of
dead processes. It measures the packet rate and switches between blocking on
the RX queue (event driven) and busy polling it.
"""

import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from .dds import DdsLibrary
from .errors import DomainBusError
from .transport import RxStatus, poll_rx, wait_rx

logger = logging.getLogger(__name__)

EWMA_ALPHA = 1 / 64
WINDOW_SIZE = 256
DEFAULT_SWITCH_UP_HZ = 10_000.0
DEFAULT_SWITCH_DOWN_HZ = 5_000.0


class RxMode(Enum):
    EVENT_DRIVEN = "event"
    POLLING = "poll"


class ForceMode(Enum):
    AUTO = "auto"
    POLL = "poll"
    EVENT = "event"


@dataclass
class ModeState:
    mode: RxMode = RxMode.EVENT_DRIVEN
    ewma_interarrival_ns: float | None = None
    window: deque = field(default_factory=lambda: deque(maxlen=WINDOW_SIZE))
    switch_up_hz: float = DEFAULT_SWITCH_UP_HZ
    switch_down_hz: float = DEFAULT_SWITCH_DOWN_HZ
    last_arrival_ns: int | None = None
    switches: int = 0

    @property
    def rate_hz(self) -> float:
        if self.ewma_interarrival_ns is None:
            return 0.0
        if self.ewma_interarrival_ns <= 0:
            return float("inf")
        return 1e9 / self.ewma_interarrival_ns


def _apply_thresholds(state: ModeState) -> None:
    rate = state.rate_hz
    if state.mode is RxMode.EVENT_DRIVEN and rate > state.switch_up_hz:
        state.mode = RxMode.POLLING
        state.switches += 1
    elif state.mode is RxMode.POLLING and rate < state.switch_down_hz:
        state.mode = RxMode.EVENT_DRIVEN
        state.switches += 1


def _fold_gap(state: ModeState, gap: int) -> None:
    state.window.append(gap)
    if state.ewma_interarrival_ns is None:
        state.ewma_interarrival_ns = float(gap)
    else:
        state.ewma_interarrival_ns += EWMA_ALPHA * (gap - state.ewma_interarrival_ns)


def update_mode(state: ModeState, arrival_ns: int) -> ModeState:
    """Fold one arrival into the EWMA; switch mode only across a threshold."""
    if state.last_arrival_ns is not None:
        _fold_gap(state, max(0, arrival_ns - state.last_arrival_ns))
        _apply_thresholds(state)
    state.last_arrival_ns = arrival_ns
    return state


def decay_idle(state: ModeState, now_ns: int) -> ModeState:
    """
    While polling with nothing arriving, count each idle stretch of twice the
    down-threshold period as one slow arrival, so the loop falls back to
    event-driven waiting once traffic stops.
    """
    if state.mode is not RxMode.POLLING or state.last_arrival_ns is None:
        return state
    idle_step = int(2e9 / state.switch_down_hz)
    while now_ns - state.last_arrival_ns >= idle_step and state.mode is RxMode.POLLING:
        state.last_arrival_ns += idle_step
        _fold_gap(state, idle_step)
        _apply_thresholds(state)
    return state


def arrivals_at(rate_hz: float, count: int, start_ns: int = 0) -> list[int]:
    """Evenly spaced synthetic arrival times."""
    if rate_hz <= 0:
        raise ValueError(f"rate_hz must be > 0, got {rate_hz}")
    return [start_ns + int(k * 1e9 / rate_hz) for k in range(count)]


def replay_trace(
    arrivals_ns: list[int],
    switch_up_hz: float = DEFAULT_SWITCH_UP_HZ,
    switch_down_hz: float = DEFAULT_SWITCH_DOWN_HZ,
) -> ModeState:
    state = ModeState(switch_up_hz=switch_up_hz, switch_down_hz=switch_down_hz)
    for t in arrivals_ns:
        update_mode(state, t)
    return state


class DaemonConfig:
    """Periods in ns and the mode thresholds in Hz."""

    def __init__(
        self,
        heartbeat_period_ns: int = 1_000_000_000,
        reclaim_period_ns: int = 100_000_000,
        switch_up_hz: float = DEFAULT_SWITCH_UP_HZ,
        switch_down_hz: float = DEFAULT_SWITCH_DOWN_HZ,
        force_mode: ForceMode | str = ForceMode.AUTO,
        rx_batch: int = 16,
    ):
        if heartbeat_period_ns <= 0 or reclaim_period_ns <= 0:
            raise ValueError("daemon periods must be > 0")
        if not 0 < switch_down_hz <= switch_up_hz:
            raise ValueError(
                f"need 0 < switch_down_hz <= switch_up_hz, got {switch_down_hz} / {switch_up_hz}"
            )
        if rx_batch <= 0:
            raise ValueError(f"rx_batch must be > 0, got {rx_batch}")
        self.heartbeat_period_ns = heartbeat_period_ns
        self.reclaim_period_ns = reclaim_period_ns
        self.switch_up_hz = switch_up_hz
        self.switch_down_hz = switch_down_hz
        self.force_mode = ForceMode(force_mode)
        self.rx_batch = rx_batch


class Daemon:
    def __init__(self, library: DdsLibrary, config: DaemonConfig | None = None, clock=time.monotonic_ns):
        self.library = library
        self.config = config or DaemonConfig()
        self.clock = clock
        self.ctx = library.context(library.system, trusted=True)
        self.mode_state = ModeState(
            switch_up_hz=self.config.switch_up_hz, switch_down_hz=self.config.switch_down_hz
        )
        if self.config.force_mode is ForceMode.POLL:
            self.mode_state.mode = RxMode.POLLING
        self.shutdown = threading.Event()
        self.heartbeats_sent = 0
        self.reclaimed = 0
        self.iterations = 0
        self.errors = 0
        self.cpu_ns = 0
        self.wall_ns = 0
        self._thread: threading.Thread | None = None

    @property
    def mode(self) -> RxMode:
        return self.mode_state.mode

    @property
    def busy_fraction(self) -> float:
        return self.cpu_ns / self.wall_ns if self.wall_ns else 0.0

    def _observe(self, arrival_ns: int) -> None:
        if self.config.force_mode is not ForceMode.AUTO:
            return
        before = self.mode_state.mode
        update_mode(self.mode_state, arrival_ns)
        if self.mode_state.mode is not before:
            logger.info(f"🔁 daemon switched to {self.mode_state.mode.value} at ~{self.mode_state.rate_hz:.0f} Hz")

    def _step(self, fn, *args):
        """Run one library operation; errors are logged and the loop continues."""
        try:
            return fn(self.ctx, *args)
        except DomainBusError as e:
            self.errors += 1
            logger.warning(f"⚠️ daemon {fn.__name__} failed: {e}")
            return None

    def run_loop(self, shutdown: threading.Event | None = None) -> None:
        shutdown = shutdown or self.shutdown
        lib = self.library
        cfg = self.config
        queue = lib.rx_queue
        start_cpu = time.thread_time_ns()
        start_wall = self.clock()
        next_reclaim = start_wall + cfg.reclaim_period_ns
        # arms the first heartbeat of every existing writer one period from now
        self._step(lib.send_heartbeats, start_wall, cfg.heartbeat_period_ns)
        next_heartbeat = lib.next_heartbeat_due() or start_wall + cfg.heartbeat_period_ns
        logger.info(f"🚀 daemon started ({self.mode.value} mode)")

        while not shutdown.is_set():
            self.iterations += 1
            now = self.clock()
            datagrams = []
            if queue is None:
                shutdown.wait(max(0, min(next_reclaim, next_heartbeat) - now) / 1e9)
            elif self.mode is RxMode.POLLING or lib.tx_backlog:
                datagrams = poll_rx(queue, cfg.rx_batch)
                if not datagrams and not lib.tx_backlog:
                    if self.config.force_mode is ForceMode.AUTO:
                        decay_idle(self.mode_state, now)
                    time.sleep(0)
            else:
                timeout = max(0, min(next_reclaim, next_heartbeat) - now)
                if wait_rx(self.ctx, queue, timeout) is RxStatus.READY:
                    datagrams = poll_rx(queue, cfg.rx_batch)

            if datagrams:
                for datagram in datagrams:
                    self._observe(datagram.arrived_ns or now)
                self._step(lib.process_rx_batch, datagrams)
            if lib.tx_backlog:
                self._step(lib.flush_tx, None)

            now = self.clock()
            if now >= next_heartbeat:
                sent = self._step(lib.send_heartbeats, now, cfg.heartbeat_period_ns)
                self.heartbeats_sent += sent or 0
                next_heartbeat = lib.next_heartbeat_due() or now + cfg.heartbeat_period_ns
            if now >= next_reclaim:
                self.reclaimed += self._step(lib.reclaim_dead_processes) or 0
                self._step(lib.expire_reassembly, None)
                next_reclaim = now + cfg.reclaim_period_ns
            self.cpu_ns = time.thread_time_ns() - start_cpu
            self.wall_ns = self.clock() - start_wall

        logger.info(
            f"🛑 daemon stopped after {self.iterations} iterations, "
            f"{self.heartbeats_sent} heartbeat rounds, {self.mode_state.switches} mode switches"
        )

    def start(self) -> "Daemon":
        self.shutdown.clear()
        self._thread = threading.Thread(target=self.run_loop, name="domainbus-daemon", daemon=True)
        self._thread.start()
        return self

    def stop(self, timeout_s: float = 2.0) -> None:
        self.shutdown.set()
        if self.library.transport is not None and self.library.endpoint is not None:
            self.library.transport.kick(self.library.endpoint)
        if self._thread is not None:
            self._thread.join(timeout_s)
            self._thread = None
