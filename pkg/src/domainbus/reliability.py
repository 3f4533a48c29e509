"""
Reliable-delivery state machines and queued transmission work.

Writer side: one WriterProxy per (local writer, remote peer) caching the
encoded datagrams of every sequence the peer has not acknowledged.
Reader side: one RemoteWriterState per (guid_prefix, topic, remote writer)
tracking the next expected sequence and holding out-of-order samples.
"""

import logging
import threading
from collections import OrderedDict
from collections.abc import Callable, Hashable
from dataclasses import dataclass, field
from typing import Any

from .wire import (
    MAX_BITMAP_BITS,
    AckNack,
    Data,
    Heartbeat,
    Message,
    MessageHeader,
    WireSample,
    encode,
    fragment_at,
    fragment_count,
)

logger = logging.getLogger(__name__)

DEFAULT_HOLD_LIMIT = 4096


# ---------- writer side ----------
class WriterProxy:
    """A local writer's view of one remote peer."""

    def __init__(self, peer: Hashable, reliable: bool = True):
        self.peer = peer
        self.reliable = reliable
        self.unacked: OrderedDict[int, list[bytes]] = OrderedDict()
        self.highest_acked = 0
        self.lock = threading.Lock()

    def record_sent(self, sequence: int, datagrams: list[bytes]) -> None:
        """Start caching a sequence; the list may still grow while it is transmitted."""
        if self.reliable:
            with self.lock:
                self.unacked[sequence] = datagrams

    def first_unacked(self, last_sent: int) -> int:
        with self.lock:
            if self.unacked:
                return next(iter(self.unacked))
        return max(self.highest_acked, last_sent) + 1

    def evict_oldest(self) -> int | None:
        """Give up on the oldest unacknowledged sequence (KeepLast history)."""
        with self.lock:
            if not self.unacked:
                return None
            sequence, _ = self.unacked.popitem(last=False)
            return sequence

    def __len__(self) -> int:
        return len(self.unacked)


def on_acknack(
    proxy: WriterProxy, an: AckNack, on_acked: Callable[[int], None] | None = None
) -> list[bytes]:
    """
    Drop every cached sequence below base_seq and return the cached datagrams
    of the sequences the peer reports missing.
    """
    if not proxy.reliable:
        return []
    acked = []
    retransmit: list[bytes] = []
    with proxy.lock:
        while proxy.unacked:
            sequence = next(iter(proxy.unacked))
            if sequence >= an.base_seq:
                break
            proxy.unacked.popitem(last=False)
            acked.append(sequence)
        proxy.highest_acked = max(proxy.highest_acked, an.base_seq - 1)
        for sequence in an.missing():
            cached = proxy.unacked.get(sequence)
            if cached:
                retransmit.extend(cached)
    if on_acked is not None:
        for sequence in acked:
            on_acked(sequence)
    if retransmit:
        logger.debug(f"peer {proxy.peer} NACKed {an.missing()}; resending {len(retransmit)} datagrams")
    return retransmit


# ---------- reader side ----------
@dataclass
class RemoteWriterState:
    """What one local instance has received from one remote writer."""

    key: tuple
    reliable: bool = True
    next_expected: int = 1
    held: dict[int, Any] = field(default_factory=dict)
    hold_limit: int = DEFAULT_HOLD_LIMIT
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def is_duplicate(self, sequence: int) -> bool:
        return sequence < self.next_expected or sequence in self.held

    def offer(self, sequence: int, item: Any) -> bool:
        """Accept a received sample for in-order release. False if it was dropped."""
        if sequence < self.next_expected:
            return False
        if not self.reliable:
            # late samples are dropped, gaps are skipped
            self.held.clear()
            self.next_expected = sequence
        elif sequence in self.held:
            return False
        elif len(self.held) >= self.hold_limit:
            return False
        self.held[sequence] = item
        return True

    def pop_ready(self) -> tuple[int, Any] | None:
        item = self.held.pop(self.next_expected, None)
        if item is None:
            return None
        sequence = self.next_expected
        self.next_expected += 1
        return sequence, item

    def push_back(self, sequence: int, item: Any) -> None:
        """Undo pop_ready for a sample the receiver could not take yet."""
        self.held[sequence] = item
        self.next_expected = sequence

    def skip_to(self, sequence: int) -> None:
        if sequence > self.next_expected:
            for stale in [s for s in self.held if s < sequence]:
                del self.held[stale]
            self.next_expected = sequence


def on_heartbeat(state: RemoteWriterState | None, hb: Heartbeat) -> AckNack | None:
    """
    Compare the advertised range against what has arrived.

    The ACKNACK's reader_id carries the id of the writer being answered, so the
    writer side can find the right proxy. Returns None for writers nobody here
    listens to.
    """
    if state is None or not state.reliable:
        return None
    state.skip_to(hb.first_seq)
    base = state.next_expected
    if hb.last_seq < base:
        return AckNack(hb.topic_id, hb.writer_id, base)
    span = min(hb.last_seq - base + 1, MAX_BITMAP_BITS)
    missing = {s for s in range(base, base + span) if s not in state.held}
    return AckNack.from_missing(hb.topic_id, hb.writer_id, base, span, missing)


# ---------- queued transmission ----------
@dataclass
class SampleTxJob:
    """Lazily encodes one sample's datagrams and sends each to every peer."""

    sample: WireSample
    payload: memoryview
    peers: list
    guid_prefix: bytes
    mtu_payload: int
    datagrams: list[bytes] = field(default_factory=list)
    on_done: Callable[..., None] | None = None
    _next: int = 0

    @property
    def total(self) -> int:
        if len(self.payload) <= self.mtu_payload:
            return 1
        return fragment_count(len(self.payload), self.mtu_payload)

    @property
    def done(self) -> bool:
        return self._next >= self.total

    def next_datagram(self) -> bytes:
        if len(self.payload) <= self.mtu_payload:
            s = self.sample
            sub = Data(s.topic_id, s.writer_id, s.sequence, s.timestamp, bytes(self.payload))
        else:
            sub = fragment_at(self.sample, self.payload, self.mtu_payload, self._next)
        datagram = encode(Message(MessageHeader(self.guid_prefix), (sub,)))
        self.datagrams.append(datagram)
        self._next += 1
        return datagram


@dataclass
class RetransmitJob:
    """Resends cached encodings to one peer."""

    peer: Any
    pending: list[bytes]
    _next: int = 0

    @property
    def done(self) -> bool:
        return self._next >= len(self.pending)

    def next_datagram(self) -> bytes:
        datagram = self.pending[self._next]
        self._next += 1
        return datagram
