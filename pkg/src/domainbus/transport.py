"""
Datagram transports.

SimulatedNetwork is a deterministic in-process lossy network: each send draws
loss, jitter and reordering from a seeded random.Random, so the delivery
schedule is a pure function of (seed, send schedule). UdpTransport carries the
same datagrams over real sockets for two-instance loopback runs.

Both deliver into RxQueues, which support non-blocking polling and an
event-driven wait with a modeled interrupt wake cost.
"""

import heapq
import itertools
import logging
import random
import selectors
import socket
import threading
import time
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from .errors import ContextViolation, IoFailure, OversizedDatagram
from .runtime import DomainContext, Mode
from .waitword import busy_wait

logger = logging.getLogger(__name__)

DEFAULT_MTU_DATAGRAM = 1408
DEFAULT_RX_CAPACITY = 4096
DEFAULT_WAKE_COST_NS = 5_000


class TransportKind(Enum):
    SIM = "sim"
    UDP = "udp"


class NetConfig:
    """Network model and limits. Probabilities are in [0, 1], times in ns."""

    def __init__(
        self,
        loss_prob: float = 0.0,
        delay_ns: int = 0,
        jitter_ns: int = 0,
        reorder_prob: float = 0.0,
        reorder_delay_ns: int = 50_000,
        seed: int = 42,
        mtu_datagram: int = DEFAULT_MTU_DATAGRAM,
        rx_capacity: int = DEFAULT_RX_CAPACITY,
        wake_cost_ns: int = DEFAULT_WAKE_COST_NS,
        transport: TransportKind | str = TransportKind.SIM,
    ):
        for name, p in (("loss_prob", loss_prob), ("reorder_prob", reorder_prob)):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        for name, v in (("delay_ns", delay_ns), ("jitter_ns", jitter_ns), ("wake_cost_ns", wake_cost_ns)):
            if v < 0:
                raise ValueError(f"{name} must be >= 0, got {v}")
        if mtu_datagram <= 0 or rx_capacity <= 0:
            raise ValueError("mtu_datagram and rx_capacity must be > 0")
        self.loss_prob = loss_prob
        self.delay_ns = delay_ns
        self.jitter_ns = jitter_ns
        self.reorder_prob = reorder_prob
        self.reorder_delay_ns = reorder_delay_ns
        self.seed = seed
        self.mtu_datagram = mtu_datagram
        self.rx_capacity = rx_capacity
        self.wake_cost_ns = wake_cost_ns
        self.transport = TransportKind(transport)


@dataclass(frozen=True)
class Endpoint:
    host: str
    port: int

    def __str__(self) -> str:
        return f"{self.host}:{self.port}"


@dataclass(frozen=True)
class Datagram:
    source: Endpoint
    payload: bytes
    arrived_ns: int = 0


class RxStatus(Enum):
    READY = "ready"
    TIMED_OUT = "timed_out"
    KICKED = "kicked"


class RxQueue:
    """Bounded RX ring: multi-producer, drop-on-overflow with a counter."""

    def __init__(self, capacity: int = DEFAULT_RX_CAPACITY, wake_cost_ns: int = 0):
        self.capacity = capacity
        self.wake_cost_ns = wake_cost_ns
        self._items: deque[Datagram] = deque()
        self._cond = threading.Condition()
        self._kicked = False
        self.dropped = 0
        self.received = 0

    def push(self, datagram: Datagram) -> bool:
        with self._cond:
            if len(self._items) >= self.capacity:
                self.dropped += 1
                return False
            self._items.append(datagram)
            self.received += 1
            self._cond.notify_all()
        return True

    def poll(self, max_items: int) -> list[Datagram]:
        with self._cond:
            n = min(max_items, len(self._items))
            return [self._items.popleft() for _ in range(n)]

    def kick(self) -> None:
        with self._cond:
            self._kicked = True
            self._cond.notify_all()

    def wait(self, timeout_ns: int | None) -> RxStatus:
        with self._cond:
            if self._items:
                return RxStatus.READY
            if self._kicked:
                self._kicked = False
                return RxStatus.KICKED
            timeout_s = None if timeout_ns is None else max(0, timeout_ns) / 1e9
            self._cond.wait_for(lambda: self._items or self._kicked, timeout_s)
            if self._items:
                status = RxStatus.READY
            elif self._kicked:
                self._kicked = False
                status = RxStatus.KICKED
            else:
                return RxStatus.TIMED_OUT
        if self.wake_cost_ns:
            busy_wait(self.wake_cost_ns)
        return status

    def __len__(self) -> int:
        with self._cond:
            return len(self._items)


def poll_rx(queue: RxQueue, max_items: int) -> list[Datagram]:
    """Up to max_items datagrams, never blocking."""
    return queue.poll(max_items)


def wait_rx(ctx: DomainContext, queue: RxQueue, timeout_ns: int | None) -> RxStatus:
    """Block until a datagram is queued, a kick arrives, or the timeout passes."""
    if ctx.mode is Mode.LIBRARY:
        raise ContextViolation("wait_rx would block inside a bounded library call")
    return queue.wait(timeout_ns)


class Transport(ABC):
    def __init__(self, config: NetConfig | None = None):
        self.config = config or NetConfig()
        self._queues: dict[Endpoint, RxQueue] = {}

    def open(self, endpoint: Endpoint) -> RxQueue:
        queue = self._queues.get(endpoint)
        if queue is None:
            queue = RxQueue(self.config.rx_capacity, self.config.wake_cost_ns)
            self._queues[endpoint] = queue
        return queue

    def kick(self, endpoint: Endpoint) -> None:
        queue = self._queues.get(endpoint)
        if queue is not None:
            queue.kick()

    def resolve(self, endpoint: Endpoint) -> Endpoint:
        """The form of endpoint that datagrams sent from it report as their source."""
        return endpoint

    def _check_size(self, payload: bytes) -> None:
        if len(payload) > self.config.mtu_datagram:
            raise OversizedDatagram(
                f"{len(payload)} B datagram exceeds mtu_datagram {self.config.mtu_datagram} B"
            )

    @abstractmethod
    def send(self, source: Endpoint, dest: Endpoint, payload: bytes) -> None: ...

    def close(self) -> None:
        pass


@dataclass(frozen=True)
class DeliveryRecord:
    send_index: int
    dest: Endpoint
    due_offset_ns: int
    lost: bool


@dataclass(order=True)
class _Pending:
    due_ns: int
    order: int
    dest: Endpoint = field(compare=False)
    datagram: Datagram = field(compare=False)


class SimulatedNetwork(Transport):
    """
    Seeded lossy network. Zero-delay configurations deliver inline; otherwise a
    wire thread moves datagrams into RX queues when they fall due.

    Counters satisfy sent - delivered - lost - dropped == in_flight at all times.
    """

    def __init__(self, config: NetConfig | None = None, clock=time.monotonic_ns):
        super().__init__(config)
        self.clock = clock
        self._rng = random.Random(self.config.seed)
        self._lock = threading.Condition()
        self._pending: list[_Pending] = []
        self._order = itertools.count()
        self.trace: list[DeliveryRecord] = []
        self.sent = 0
        self.delivered = 0
        self.lost = 0
        self.dropped = 0
        self._closed = False
        self._thread: threading.Thread | None = None

    @property
    def in_flight(self) -> int:
        with self._lock:
            return len(self._pending)

    def counters(self) -> dict[str, int]:
        with self._lock:
            return {
                "sent": self.sent,
                "delivered": self.delivered,
                "lost": self.lost,
                "dropped": self.dropped,
                "in_flight": len(self._pending),
            }

    def send(self, source: Endpoint, dest: Endpoint, payload: bytes) -> None:
        self._check_size(payload)
        cfg = self.config
        with self._lock:
            index = self.sent
            self.sent += 1
            lost = self._rng.random() < cfg.loss_prob
            offset = cfg.delay_ns
            if cfg.jitter_ns:
                offset += self._rng.randrange(cfg.jitter_ns + 1)
            if cfg.reorder_prob and self._rng.random() < cfg.reorder_prob:
                offset += cfg.reorder_delay_ns
            self.trace.append(DeliveryRecord(index, dest, offset, lost))
            queue = self._queues.get(dest)
            if lost or queue is None:
                if queue is None:
                    logger.debug(f"no receiver at {dest}; datagram counted lost")
                self.lost += 1
                return
            now = self.clock()
            datagram = Datagram(source, bytes(payload), now + offset)
            if offset == 0:
                self._deliver(queue, datagram)
                return
            heapq.heappush(self._pending, _Pending(now + offset, next(self._order), dest, datagram))
            self._ensure_wire_thread()
            self._lock.notify_all()

    def _deliver(self, queue: RxQueue, datagram: Datagram) -> None:
        if queue.push(datagram):
            self.delivered += 1
        else:
            self.dropped += 1

    def pump(self, now_ns: int | None = None) -> int:
        """Deliver every pending datagram that is due. Returns how many were moved."""
        now = self.clock() if now_ns is None else now_ns
        moved = 0
        with self._lock:
            while self._pending and self._pending[0].due_ns <= now:
                item = heapq.heappop(self._pending)
                self._deliver(self._queues[item.dest], item.datagram)
                moved += 1
        return moved

    def _ensure_wire_thread(self) -> None:
        if self._thread is None:
            self._thread = threading.Thread(target=self._wire_loop, name="sim-wire", daemon=True)
            self._thread.start()

    def _wire_loop(self) -> None:
        with self._lock:
            while not self._closed:
                if not self._pending:
                    self._lock.wait()
                    continue
                wait_ns = self._pending[0].due_ns - self.clock()
                if wait_ns > 0:
                    self._lock.wait(wait_ns / 1e9)
                    continue
                item = heapq.heappop(self._pending)
                self._deliver(self._queues[item.dest], item.datagram)

    def close(self) -> None:
        with self._lock:
            self._closed = True
            self._lock.notify_all()
        if self._thread is not None:
            self._thread.join(timeout=1.0)


class UdpTransport(Transport):
    """UDP sockets on host:port endpoints, read by one selector thread."""

    def __init__(self, config: NetConfig | None = None):
        super().__init__(config)
        self._sockets: dict[Endpoint, socket.socket] = {}
        self._selector = selectors.DefaultSelector()
        self._closed = threading.Event()
        self._thread: threading.Thread | None = None
        self.sent = 0

    def open(self, endpoint: Endpoint) -> RxQueue:
        queue = super().open(endpoint)
        if endpoint not in self._sockets:
            sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            sock.bind((endpoint.host, endpoint.port))
            sock.setblocking(False)
            self._sockets[endpoint] = sock
            self._selector.register(sock, selectors.EVENT_READ, (endpoint, queue))
            logger.info(f"🔌 UDP endpoint listening on {endpoint}")
        if self._thread is None:
            self._thread = threading.Thread(target=self._reader_loop, name="udp-rx", daemon=True)
            self._thread.start()
        return queue

    def resolve(self, endpoint: Endpoint) -> Endpoint:
        """Host names become the IPv4 address recvfrom reports."""
        try:
            return Endpoint(socket.gethostbyname(endpoint.host), endpoint.port)
        except OSError as e:
            raise IoFailure(f"cannot resolve {endpoint}: {e}") from e

    def send(self, source: Endpoint, dest: Endpoint, payload: bytes) -> None:
        self._check_size(payload)
        sock = self._sockets.get(source)
        if sock is None:
            raise ValueError(f"endpoint {source} was never opened")
        try:
            sock.sendto(payload, (dest.host, dest.port))
            self.sent += 1
        except BlockingIOError:
            # full socket buffer behaves like a lost datagram
            logger.debug(f"UDP send buffer full on {source}")

    def _reader_loop(self) -> None:
        while not self._closed.is_set():
            for key, _ in self._selector.select(timeout=0.05):
                _, queue = key.data
                while True:
                    try:
                        payload, (host, port) = key.fileobj.recvfrom(65535)
                    except (BlockingIOError, OSError):
                        break
                    queue.push(Datagram(Endpoint(host, port), payload, time.monotonic_ns()))

    def close(self) -> None:
        self._closed.set()
        if self._thread is not None:
            self._thread.join(timeout=1.0)
        for sock in self._sockets.values():
            self._selector.unregister(sock)
            sock.close()
        self._sockets.clear()
        self._selector.close()


def create_transport(config: NetConfig) -> Transport:
    if config.transport is TransportKind.UDP:
        return UdpTransport(config)
    return SimulatedNetwork(config)
