"""
Tests for the wire codec, fragmentation and reassembly.
"""

import numpy as np
import pytest

from domainbus.errors import FragMetadataMismatch, MalformedMessage
from domainbus.wire import (
    DEFAULT_MTU_PAYLOAD,
    FRAG_OVERHEAD,
    HEADER,
    MAX_BITMAP_BITS,
    AckNack,
    Data,
    DataFrag,
    Heartbeat,
    Message,
    MessageHeader,
    Reassembler,
    WireSample,
    decode,
    encode,
    fragment_at,
    fragment_sample,
)

GUID = bytes(range(12))
SAMPLE = WireSample(topic_id=3, writer_id=9, sequence=42, timestamp=123456789)


def roundtrip(*subs):
    return decode(encode(Message(MessageHeader(GUID), subs))).submessages


@pytest.mark.unit
class TestCodec:
    """Test encode/decode of each submessage kind."""

    def test_each_kind(self):
        subs = (
            Data(1, 2, 3, 4, b"payload"),
            DataFrag(1, 2, 3, 4, frag_index=1, frag_count=2, frag_size=8, total_len=12, payload=b"tail"),
            Heartbeat(1, 2, 1, 10, 7),
            AckNack.from_missing(1, 2, 5, 16, {5, 9, 20}),
        )
        assert roundtrip(*subs) == subs

    def test_empty_data_payload(self):
        assert roundtrip(Data(1, 1, 1, 0, b"")) == (Data(1, 1, 1, 0, b""),)
        assert fragment_sample(SAMPLE, b"") == [Data(3, 9, 42, 123456789, b"")]

    def test_header_layout(self):
        raw = encode(Message(MessageHeader(GUID), (Heartbeat(1, 2, 1, 1, 1),)))
        assert raw[:4] == b"HPSL"
        assert HEADER.size == 18
        assert raw[4:18] == bytes([1, 0]) + GUID

    def test_little_endian_fields(self):
        raw = encode(Message(MessageHeader(GUID), (Data(0x01020304, 0, 0, 0, b""),)))
        assert raw[22:26] == bytes([4, 3, 2, 1])

    def test_bad_guid(self):
        with pytest.raises(MalformedMessage):
            encode(Message(MessageHeader(b"short"), (Heartbeat(1, 2, 1, 1, 1),)))

    def test_out_of_range_field(self):
        with pytest.raises(MalformedMessage):
            encode(Message(MessageHeader(GUID), (Heartbeat(2**32, 2, 1, 1, 1),)))

    def test_acknack_bitmap(self):
        ack = AckNack.from_missing(1, 2, base_seq=10, bitmap_len=10, missing={10, 17, 19, 25})
        assert ack.missing() == [10, 17, 19]
        assert len(ack.bitmap) == 2

    def test_acknack_unused_bits_masked(self):
        raw = bytearray(encode(Message(MessageHeader(GUID), (AckNack(1, 2, 0, 3, b"\x01"),))))
        raw[-1] = 0xFF
        (ack,) = decode(bytes(raw)).submessages
        assert ack.missing() == [0, 1, 2]
        assert ack.bitmap == b"\x07"

    def test_acknack_too_many_bits(self):
        with pytest.raises(MalformedMessage):
            encode(Message(MessageHeader(GUID), (AckNack(1, 2, 0, 257, bytes(33)),)))


@pytest.mark.unit
class TestMalformed:
    """Test that decode is total over bad input."""

    @pytest.mark.parametrize(
        "raw",
        [
            b"",
            b"HPS",
            b"XXXX" + bytes(14) + bytes([0x15, 1, 0, 0]),
            b"HPSL" + bytes([2, 0]) + GUID + bytes([0x07, 1, 0, 0]),
            b"HPSL" + bytes([1, 0]) + GUID,
            b"HPSL" + bytes([1, 0]) + GUID + bytes([0x99, 1, 0, 0]),
            b"HPSL" + bytes([1, 0]) + GUID + bytes([0x07, 1, 0xFF, 0xFF]),
            b"HPSL" + bytes([1, 0]) + GUID + bytes([0x07, 1, 4, 0, 0, 0, 0, 0]),
            b"HPSL" + bytes([1, 0]) + GUID + bytes([0x15]),
        ],
    )
    def test_rejected(self, raw):
        with pytest.raises(MalformedMessage):
            decode(raw)

    def test_inconsistent_fragment_geometry(self):
        raw = encode(
            Message(
                MessageHeader(GUID),
                (DataFrag(1, 2, 3, 4, frag_index=0, frag_count=2, frag_size=8, total_len=40, payload=bytes(8)),),
            )
        )
        with pytest.raises(MalformedMessage):
            decode(raw)

    def test_random_bytes(self):
        rng = np.random.default_rng(11)
        for _ in range(3000):
            raw = rng.integers(0, 256, int(rng.integers(0, 96)), dtype=np.uint8).tobytes()
            if rng.random() < 0.5:
                raw = b"HPSL\x01\x00" + raw
            try:
                decode(raw)
            except MalformedMessage:
                pass

    def test_mutated_valid_datagrams(self):
        rng = np.random.default_rng(12)
        valid = bytearray(
            encode(
                Message(
                    MessageHeader(GUID),
                    (Data(1, 2, 3, 4, b"x" * 40), Heartbeat(1, 2, 1, 3, 1), AckNack.from_missing(1, 2, 1, 9, {2})),
                )
            )
        )
        for _ in range(3000):
            raw = bytearray(valid)
            for _ in range(int(rng.integers(1, 4))):
                raw[int(rng.integers(len(raw)))] = int(rng.integers(256))
            raw = raw[: int(rng.integers(len(raw) + 1))] if rng.random() < 0.3 else raw
            try:
                decode(bytes(raw))
            except MalformedMessage:
                pass


@pytest.mark.unit
class TestFragmentation:
    """Test splitting samples into MTU-sized fragments."""

    def test_small_sample_is_one_data(self):
        subs = fragment_sample(SAMPLE, b"a" * DEFAULT_MTU_PAYLOAD)
        assert len(subs) == 1
        assert isinstance(subs[0], Data)

    def test_16k_sample(self):
        subs = fragment_sample(SAMPLE, bytes(16 * 1024))
        assert len(subs) == 13
        assert all(isinstance(s, DataFrag) for s in subs)

    def test_1m_sample(self):
        subs = fragment_sample(SAMPLE, bytes(1024 * 1024))
        assert len(subs) == 781
        assert len(subs[-1].payload) == 256
        assert {s.frag_count for s in subs} == {781}

    def test_fragment_datagram_fits_mtu(self):
        frag = fragment_sample(SAMPLE, bytes(4000))[0]
        raw = encode(Message(MessageHeader(GUID), (frag,)))
        assert len(raw) == DEFAULT_MTU_PAYLOAD + FRAG_OVERHEAD == 1408

    def test_bad_mtu(self):
        with pytest.raises(ValueError):
            fragment_sample(SAMPLE, b"abc", 0)


@pytest.mark.unit
class TestReassembly:
    """Test reassembly under reordering, duplication and interleaving."""

    def test_permuted_and_duplicated(self):
        rng = np.random.default_rng(5)
        payload = rng.integers(0, 256, 20_000, dtype=np.uint8).tobytes()
        frags = fragment_sample(SAMPLE, payload)
        order = list(rng.permutation(len(frags))) + list(rng.integers(0, len(frags), 10))
        reasm = Reassembler()

        results = [reasm.reassemble(GUID, frags[i]) for i in order]
        completed = [r for r in results if r is not None]

        assert completed == [payload]
        assert reasm.pending == 0
        assert reasm.bytes_in_use == 0

    def test_interleaved_keys(self):
        other = WireSample(3, 9, 43, 0)
        a = fragment_sample(SAMPLE, b"a" * 3000)
        b = fragment_sample(other, b"b" * 3000)
        reasm = Reassembler()
        out = [reasm.reassemble(GUID, f) for pair in zip(a, b) for f in pair]
        assert [r for r in out if r] == [b"a" * 3000, b"b" * 3000]

    def test_geometry_mismatch(self):
        reasm = Reassembler()
        first = DataFrag(1, 2, 3, 4, 0, 2, 8, 12, bytes(8))
        liar = DataFrag(1, 2, 3, 4, 1, 2, 8, 10, bytes(2))
        reasm.reassemble(GUID, first)
        with pytest.raises(FragMetadataMismatch):
            reasm.reassemble(GUID, liar)

    def test_expiry(self):
        now = [0]
        reasm = Reassembler(expiry_ns=1_000, clock=lambda: now[0])
        reasm.reassemble(GUID, DataFrag(1, 2, 3, 4, 0, 2, 8, 12, bytes(8)))
        reasm.reassemble(GUID, DataFrag(1, 2, 4, 4, 0, 2, 8, 12, bytes(8)), expires=False)

        now[0] = 500
        assert reasm.expire() == 0
        now[0] = 2_000
        assert reasm.expire() == 1
        assert reasm.pending == 1
        assert reasm.bytes_in_use == 12

    def test_forget(self):
        reasm = Reassembler()
        reasm.reassemble(GUID, DataFrag(1, 2, 3, 4, 0, 2, 8, 12, bytes(8)))
        reasm.forget((GUID, 1, 2))
        assert reasm.pending == 0
        assert reasm.bytes_in_use == 0


def random_submessage(rng: np.random.Generator):
    def u32() -> int:
        return int.from_bytes(rng.bytes(4), "little")

    def u64() -> int:
        return int.from_bytes(rng.bytes(8), "little")

    kind = int(rng.integers(4))
    if kind == 0:
        return Data(u32(), u32(), u64(), u64(), rng.bytes(int(rng.integers(0, 300))))
    if kind == 1:
        total = int(rng.integers(2, 3000))
        frag_size = int(rng.integers(1, total))
        index = int(rng.integers(-(-total // frag_size)))
        sample = WireSample(u32(), u32(), u64(), u64())
        return fragment_at(sample, rng.bytes(total), frag_size, index)
    if kind == 2:
        return Heartbeat(u32(), u32(), u64(), u64(), u32())
    bitmap_len = int(rng.integers(0, MAX_BITMAP_BITS + 1))
    base = u64() >> 1
    missing = {base + int(i) for i in rng.integers(0, max(bitmap_len, 1), int(rng.integers(0, 20)))}
    return AckNack.from_missing(u32(), u32(), base, bitmap_len, missing)


def through_wire(payload: bytes, rng: np.random.Generator, duplicates: int = 0) -> list[bytes]:
    """Fragment, send each piece as its own datagram in a shuffled order, reassemble."""
    subs = fragment_sample(SAMPLE, payload)
    datagrams = [encode(Message(MessageHeader(GUID), (sub,))) for sub in subs]
    order = list(rng.permutation(len(datagrams))) + list(rng.integers(0, len(datagrams), duplicates))
    reasm = Reassembler()
    completed = []
    for i in order:
        (sub,) = decode(datagrams[i]).submessages
        if isinstance(sub, Data):
            completed.append(sub.payload)
        elif (done := reasm.reassemble(GUID, sub)) is not None:
            completed.append(done)
    assert reasm.bytes_in_use == 0
    return completed


@pytest.mark.slow
class TestCodecAtScale:
    """Test decode totality and encode/decode identity over large random inputs."""

    def test_million_random_inputs(self):
        rng = np.random.default_rng(21)
        rejected = 0
        for _ in range(100):
            lengths = rng.integers(0, 96, 10_000).tolist()
            prefixed = (rng.random(10_000) < 0.5).tolist()
            blob = rng.bytes(sum(lengths))
            pos = 0
            for n, prefix in zip(lengths, prefixed):
                raw = blob[pos : pos + n]
                pos += n
                try:
                    decode(b"HPSL\x01\x00" + raw if prefix else raw)
                except MalformedMessage:
                    rejected += 1
        assert rejected > 900_000

    def test_random_valid_messages_roundtrip(self):
        rng = np.random.default_rng(22)
        for _ in range(10_000):
            header = MessageHeader(rng.bytes(12), flags=int(rng.integers(256)))
            subs = tuple(random_submessage(rng) for _ in range(int(rng.integers(1, 5))))
            message = Message(header, subs)
            assert decode(encode(message)) == message


@pytest.mark.slow
class TestFragmentationAtScale:
    """Test fragment/reassemble identity across sizes and arrival orders."""

    @pytest.mark.parametrize("size", [64, 1024, 16 * 1024, 1024 * 1024])
    def test_fixed_sizes(self, size):
        rng = np.random.default_rng(size)
        payload = rng.bytes(size)
        assert through_wire(payload, rng) == [payload]

    @pytest.mark.parametrize("size", [64, 1024, 16 * 1024, 1024 * 1024])
    def test_fixed_sizes_with_duplicates(self, size):
        rng = np.random.default_rng(size + 1)
        payload = rng.bytes(size)
        copies = 1 if size > DEFAULT_MTU_PAYLOAD else 26
        assert through_wire(payload, rng, duplicates=25) == [payload] * copies

    def test_random_sizes_up_to_4m(self):
        rng = np.random.default_rng(23)
        sizes = np.exp(rng.uniform(0, np.log(4 * 1024 * 1024), 40)).astype(int).tolist()
        for size in [1, 4 * 1024 * 1024, *sizes]:
            payload = rng.bytes(size)
            completed = through_wire(payload, rng, duplicates=int(rng.integers(0, 10)))
            assert completed[0] == payload
            if size > DEFAULT_MTU_PAYLOAD:
                assert len(completed) == 1
