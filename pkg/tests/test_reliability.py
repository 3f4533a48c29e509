"""
Tests for the reliable-delivery state machines.
"""

import pytest

from domainbus.reliability import (
    RemoteWriterState,
    RetransmitJob,
    SampleTxJob,
    WriterProxy,
    on_acknack,
    on_heartbeat,
)
from domainbus.wire import (
    MAX_BITMAP_BITS,
    AckNack,
    Data,
    DataFrag,
    Heartbeat,
    Message,
    MessageHeader,
    WireSample,
    decode,
    encode,
)

GUID = bytes(12)


@pytest.mark.unit
class TestWriterProxy:
    """Test acknowledgment and retransmission on the writer side."""

    def setup_method(self):
        self.proxy = WriterProxy(peer="b")
        for seq in range(1, 6):
            self.proxy.record_sent(seq, [f"dg{seq}".encode()])

    def test_ack_drops_prefix(self):
        acked = []
        resend = on_acknack(self.proxy, AckNack(1, 7, base_seq=4), acked.append)

        assert resend == []
        assert acked == [1, 2, 3]
        assert list(self.proxy.unacked) == [4, 5]
        assert self.proxy.highest_acked == 3

    def test_nack_returns_cached_encodings(self):
        an = AckNack.from_missing(1, 7, base_seq=2, bitmap_len=4, missing={2, 4})
        assert on_acknack(self.proxy, an) == [b"dg2", b"dg4"]
        assert len(self.proxy) == 4

    def test_nack_for_uncached_sequence(self):
        an = AckNack.from_missing(1, 7, base_seq=5, bitmap_len=8, missing={9})
        assert on_acknack(self.proxy, an) == []

    def test_first_unacked(self):
        assert self.proxy.first_unacked(last_sent=5) == 1
        on_acknack(self.proxy, AckNack(1, 7, base_seq=6))
        assert self.proxy.first_unacked(last_sent=5) == 6

    def test_evict_oldest(self):
        assert self.proxy.evict_oldest() == 1
        assert list(self.proxy.unacked) == [2, 3, 4, 5]

    def test_best_effort_caches_nothing(self):
        proxy = WriterProxy(peer="b", reliable=False)
        proxy.record_sent(1, [b"x"])
        assert len(proxy) == 0
        assert on_acknack(proxy, AckNack.from_missing(1, 7, 1, 1, {1})) == []


@pytest.mark.unit
class TestRemoteWriterState:
    """Test in-order release on the reader side."""

    def test_in_order_release_after_gap_fills(self):
        state = RemoteWriterState(key=("g", 1, 1))
        assert state.offer(2, "b")
        assert state.pop_ready() is None
        assert state.offer(1, "a")
        assert state.pop_ready() == (1, "a")
        assert state.pop_ready() == (2, "b")
        assert state.next_expected == 3

    def test_duplicates(self):
        state = RemoteWriterState(key=("g", 1, 1))
        state.offer(1, "a")
        assert not state.offer(1, "a")
        state.pop_ready()
        assert state.is_duplicate(1)
        assert not state.offer(1, "a")

    def test_hold_limit(self):
        state = RemoteWriterState(key=("g", 1, 1), hold_limit=2)
        assert state.offer(3, "c")
        assert state.offer(4, "d")
        assert not state.offer(5, "e")

    def test_best_effort_skips_gaps(self):
        state = RemoteWriterState(key=("g", 1, 1), reliable=False)
        state.offer(3, "c")
        assert state.pop_ready() == (3, "c")
        assert not state.offer(2, "late")

    def test_push_back(self):
        state = RemoteWriterState(key=("g", 1, 1))
        state.offer(1, "a")
        seq, item = state.pop_ready()
        state.push_back(seq, item)
        assert state.pop_ready() == (1, "a")

    def test_skip_to(self):
        state = RemoteWriterState(key=("g", 1, 1))
        state.offer(2, "b")
        state.offer(6, "f")
        state.skip_to(5)
        assert state.next_expected == 5
        assert list(state.held) == [6]


@pytest.mark.unit
class TestHeartbeat:
    """Test ACKNACK generation."""

    def test_all_received(self):
        state = RemoteWriterState(key=("g", 1, 9), next_expected=4)
        an = on_heartbeat(state, Heartbeat(1, 9, 1, 3, 1))
        assert an.base_seq == 4
        assert an.missing() == []
        assert an.reader_id == 9

    def test_reports_missing(self):
        state = RemoteWriterState(key=("g", 1, 9))
        state.offer(2, "b")
        an = on_heartbeat(state, Heartbeat(1, 9, 1, 4, 1))
        assert an.base_seq == 1
        assert an.missing() == [1, 3, 4]

    def test_first_seq_skips_evicted(self):
        state = RemoteWriterState(key=("g", 1, 9))
        an = on_heartbeat(state, Heartbeat(1, 9, 5, 6, 1))
        assert state.next_expected == 5
        assert an.missing() == [5, 6]

    def test_bitmap_capped(self):
        state = RemoteWriterState(key=("g", 1, 9))
        an = on_heartbeat(state, Heartbeat(1, 9, 1, 10_000, 1))
        assert an.bitmap_len == MAX_BITMAP_BITS == 255

        (decoded,) = decode(encode(Message(MessageHeader(GUID), (an,)))).submessages
        assert decoded.missing() == list(range(1, 256))

    def test_unknown_or_best_effort_writer(self):
        assert on_heartbeat(None, Heartbeat(1, 9, 1, 3, 1)) is None
        state = RemoteWriterState(key=("g", 1, 9), reliable=False)
        assert on_heartbeat(state, Heartbeat(1, 9, 1, 3, 1)) is None


@pytest.mark.unit
class TestTxJobs:
    """Test lazy encoding of queued transmissions."""

    def test_small_sample_single_datagram(self):
        job = SampleTxJob(WireSample(1, 2, 3, 4), memoryview(b"hello"), ["b"], GUID, 1344)
        assert job.total == 1
        (sub,) = decode(job.next_datagram()).submessages
        assert sub == Data(1, 2, 3, 4, b"hello")
        assert job.done
        assert len(job.datagrams) == 1

    def test_fragmented_sample(self):
        job = SampleTxJob(WireSample(1, 2, 3, 4), memoryview(bytes(3000)), ["b"], GUID, 1344)
        subs = []
        while not job.done:
            (sub,) = decode(job.next_datagram()).submessages
            subs.append(sub)
        assert [s.frag_index for s in subs] == [0, 1, 2]
        assert all(isinstance(s, DataFrag) for s in subs)

    def test_retransmit_job(self):
        job = RetransmitJob(peer="b", pending=[b"1", b"2"])
        assert [job.next_datagram(), job.next_datagram()] == [b"1", b"2"]
        assert job.done
