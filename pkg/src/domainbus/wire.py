"""
Wire format for the RTPS-subset protocol.

Datagram = MessageHeader + one or more submessages. Every integer is
little-endian; every submessage starts with id u8, flags u8, length u16
(octets to the next submessage).

    MessageHeader  "HPSL" | version u8 | flags u8 | guid_prefix[12]       (18 B)
    DATA           topic u32 | writer u32 | seq u64 | ts u64 | len u32 | payload
    DATA_FRAG      DATA fields | frag_index u32 | frag_count u32 | frag_size u16 | total_len u32 | payload
    HEARTBEAT      topic u32 | writer u32 | first_seq u64 | last_seq u64 | count u32
    ACKNACK        topic u32 | reader u32 | base_seq u64 | bitmap_len u8 | bitmap (ceil(bits/8) B)

ACKNACK bitmap_len counts bits (at most 255, the u8 limit); bit i set means base_seq + i is
missing. Bits are LSB first within each byte.
"""

import logging
import struct
import time
from collections import OrderedDict
from collections.abc import Iterator
from dataclasses import dataclass, field
from enum import IntEnum

from .errors import FragMetadataMismatch, MalformedMessage

logger = logging.getLogger(__name__)

MAGIC = b"HPSL"
VERSION = 1
GUID_PREFIX_LEN = 12
MAX_BITMAP_BITS = 255
DEFAULT_MTU_PAYLOAD = 1344
FLAG_LITTLE_ENDIAN = 0x01

HEADER = struct.Struct("<4sBB12s")
SUBMESSAGE_HEADER = struct.Struct("<BBH")
DATA_FIXED = struct.Struct("<IIQQI")
FRAG_FIXED = struct.Struct("<IIQQIIIHI")
HEARTBEAT_BODY = struct.Struct("<IIQQI")
ACKNACK_FIXED = struct.Struct("<IIQB")

# bytes of header in front of a DATA_FRAG payload inside one datagram
FRAG_OVERHEAD = HEADER.size + SUBMESSAGE_HEADER.size + FRAG_FIXED.size


class SubmessageId(IntEnum):
    ACKNACK = 0x06
    HEARTBEAT = 0x07
    DATA = 0x15
    DATA_FRAG = 0x16


@dataclass(frozen=True)
class MessageHeader:
    guid_prefix: bytes
    version: int = VERSION
    flags: int = 0


@dataclass(frozen=True)
class Data:
    topic_id: int
    writer_id: int
    sequence: int
    timestamp: int
    payload: bytes = b""


@dataclass(frozen=True)
class DataFrag:
    topic_id: int
    writer_id: int
    sequence: int
    timestamp: int
    frag_index: int
    frag_count: int
    frag_size: int
    total_len: int
    payload: bytes = b""


@dataclass(frozen=True)
class Heartbeat:
    topic_id: int
    writer_id: int
    first_seq: int
    last_seq: int
    count: int


@dataclass(frozen=True)
class AckNack:
    topic_id: int
    reader_id: int
    base_seq: int
    bitmap_len: int = 0
    bitmap: bytes = b""

    @classmethod
    def from_missing(
        cls, topic_id: int, reader_id: int, base_seq: int, bitmap_len: int, missing: set[int]
    ) -> "AckNack":
        bitmap_len = min(bitmap_len, MAX_BITMAP_BITS)
        bits = bytearray(-(-bitmap_len // 8))
        for seq in missing:
            i = seq - base_seq
            if 0 <= i < bitmap_len:
                bits[i // 8] |= 1 << (i % 8)
        return cls(topic_id, reader_id, base_seq, bitmap_len, bytes(bits))

    def missing(self) -> list[int]:
        return [
            self.base_seq + i
            for i in range(self.bitmap_len)
            if self.bitmap[i // 8] >> (i % 8) & 1
        ]


Submessage = Data | DataFrag | Heartbeat | AckNack


@dataclass(frozen=True)
class Message:
    header: MessageHeader
    submessages: tuple = field(default_factory=tuple)


@dataclass(frozen=True)
class WireSample:
    """Identity of a sample on the wire, the part shared by all of its fragments."""

    topic_id: int
    writer_id: int
    sequence: int
    timestamp: int


# ---------- encode ----------
def _encode_submessage(sub: Submessage) -> bytes:
    if isinstance(sub, Data):
        body = DATA_FIXED.pack(
            sub.topic_id, sub.writer_id, sub.sequence, sub.timestamp, len(sub.payload)
        ) + bytes(sub.payload)
        sid = SubmessageId.DATA
    elif isinstance(sub, DataFrag):
        body = FRAG_FIXED.pack(
            sub.topic_id,
            sub.writer_id,
            sub.sequence,
            sub.timestamp,
            len(sub.payload),
            sub.frag_index,
            sub.frag_count,
            sub.frag_size,
            sub.total_len,
        ) + bytes(sub.payload)
        sid = SubmessageId.DATA_FRAG
    elif isinstance(sub, Heartbeat):
        body = HEARTBEAT_BODY.pack(
            sub.topic_id, sub.writer_id, sub.first_seq, sub.last_seq, sub.count
        )
        sid = SubmessageId.HEARTBEAT
    elif isinstance(sub, AckNack):
        if not 0 <= sub.bitmap_len <= MAX_BITMAP_BITS:
            raise MalformedMessage(f"bitmap_len {sub.bitmap_len} exceeds {MAX_BITMAP_BITS}")
        nbytes = -(-sub.bitmap_len // 8)
        if len(sub.bitmap) != nbytes:
            raise MalformedMessage("bitmap length does not match bitmap_len")
        body = ACKNACK_FIXED.pack(sub.topic_id, sub.reader_id, sub.base_seq, sub.bitmap_len) + bytes(
            sub.bitmap
        )
        sid = SubmessageId.ACKNACK
    else:
        raise MalformedMessage(f"unknown submessage type {type(sub).__name__}")
    if len(body) > 0xFFFF:
        raise MalformedMessage(f"submessage body of {len(body)} B does not fit a u16 length")
    return SUBMESSAGE_HEADER.pack(sid, FLAG_LITTLE_ENDIAN, len(body)) + body


def encode(message: Message) -> bytes:
    header = message.header
    if len(header.guid_prefix) != GUID_PREFIX_LEN:
        raise MalformedMessage(f"guid_prefix must be {GUID_PREFIX_LEN} bytes")
    try:
        parts = [HEADER.pack(MAGIC, header.version, header.flags, header.guid_prefix)]
        parts.extend(_encode_submessage(sub) for sub in message.submessages)
    except struct.error as e:
        raise MalformedMessage(f"field out of range: {e}") from e
    return b"".join(parts)


# ---------- decode ----------
def _decode_data(body: memoryview) -> Data:
    if len(body) < DATA_FIXED.size:
        raise MalformedMessage("truncated DATA")
    topic, writer, seq, ts, plen = DATA_FIXED.unpack_from(body)
    if len(body) != DATA_FIXED.size + plen:
        raise MalformedMessage("DATA payload length mismatch")
    return Data(topic, writer, seq, ts, bytes(body[DATA_FIXED.size :]))


def _decode_frag(body: memoryview) -> DataFrag:
    if len(body) < FRAG_FIXED.size:
        raise MalformedMessage("truncated DATA_FRAG")
    topic, writer, seq, ts, plen, index, count, size, total = FRAG_FIXED.unpack_from(body)
    if len(body) != FRAG_FIXED.size + plen:
        raise MalformedMessage("DATA_FRAG payload length mismatch")
    if size == 0 or count == 0 or index >= count or total == 0:
        raise MalformedMessage("DATA_FRAG with empty geometry")
    if not (count - 1) * size < total <= count * size:
        raise MalformedMessage("DATA_FRAG total_len inconsistent with frag_count")
    expected = size if index < count - 1 else total - (count - 1) * size
    if plen != expected:
        raise MalformedMessage(f"fragment {index} carries {plen} B, expected {expected}")
    return DataFrag(topic, writer, seq, ts, index, count, size, total, bytes(body[FRAG_FIXED.size :]))


def _decode_heartbeat(body: memoryview) -> Heartbeat:
    if len(body) != HEARTBEAT_BODY.size:
        raise MalformedMessage("HEARTBEAT has wrong length")
    return Heartbeat(*HEARTBEAT_BODY.unpack_from(body))


def _decode_acknack(body: memoryview) -> AckNack:
    if len(body) < ACKNACK_FIXED.size:
        raise MalformedMessage("truncated ACKNACK")
    topic, reader, base, nbits = ACKNACK_FIXED.unpack_from(body)
    if nbits > MAX_BITMAP_BITS:
        raise MalformedMessage(f"bitmap_len {nbits} exceeds {MAX_BITMAP_BITS}")
    nbytes = -(-nbits // 8)
    if len(body) != ACKNACK_FIXED.size + nbytes:
        raise MalformedMessage("ACKNACK bitmap length mismatch")
    bitmap = bytearray(body[ACKNACK_FIXED.size :])
    if nbits % 8:
        # unused high bits of the last byte carry no meaning
        bitmap[-1] &= (1 << (nbits % 8)) - 1
    return AckNack(topic, reader, base, nbits, bytes(bitmap))


_DECODERS = {
    SubmessageId.DATA: _decode_data,
    SubmessageId.DATA_FRAG: _decode_frag,
    SubmessageId.HEARTBEAT: _decode_heartbeat,
    SubmessageId.ACKNACK: _decode_acknack,
}


def decode(data: bytes | bytearray | memoryview) -> Message:
    """Decode one datagram. Total over arbitrary input: bad bytes raise MalformedMessage."""
    view = memoryview(data)
    if len(view) < HEADER.size:
        raise MalformedMessage("datagram shorter than message header")
    magic, version, flags, guid = HEADER.unpack_from(view)
    if magic != MAGIC:
        raise MalformedMessage("bad magic")
    if version != VERSION:
        raise MalformedMessage(f"unsupported version {version}")
    pos = HEADER.size
    submessages = []
    while pos < len(view):
        if len(view) - pos < SUBMESSAGE_HEADER.size:
            raise MalformedMessage("truncated submessage header")
        sid, _flags, length = SUBMESSAGE_HEADER.unpack_from(view, pos)
        pos += SUBMESSAGE_HEADER.size
        if length > len(view) - pos:
            raise MalformedMessage("submessage runs past end of datagram")
        try:
            decoder = _DECODERS[SubmessageId(sid)]
        except ValueError:
            raise MalformedMessage(f"unknown submessage id {sid:#x}") from None
        submessages.append(decoder(view[pos : pos + length]))
        pos += length
    if not submessages:
        raise MalformedMessage("datagram carries no submessages")
    return Message(MessageHeader(bytes(guid), version, flags), tuple(submessages))


# ---------- fragmentation ----------
def fragment_count(total_len: int, frag_size: int) -> int:
    return -(-total_len // frag_size)


def fragment_at(sample: WireSample, payload: bytes | memoryview, frag_size: int, index: int) -> DataFrag:
    total = len(payload)
    start = index * frag_size
    return DataFrag(
        sample.topic_id,
        sample.writer_id,
        sample.sequence,
        sample.timestamp,
        frag_index=index,
        frag_count=fragment_count(total, frag_size),
        frag_size=frag_size,
        total_len=total,
        payload=bytes(payload[start : start + frag_size]),
    )


def iter_fragments(
    sample: WireSample, payload: bytes | memoryview, mtu_payload: int
) -> Iterator[Submessage]:
    if mtu_payload <= 0:
        raise ValueError(f"mtu_payload must be > 0, got {mtu_payload}")
    if len(payload) <= mtu_payload:
        yield Data(sample.topic_id, sample.writer_id, sample.sequence, sample.timestamp, bytes(payload))
        return
    for index in range(fragment_count(len(payload), mtu_payload)):
        yield fragment_at(sample, payload, mtu_payload, index)


def fragment_sample(
    sample: WireSample, payload: bytes | memoryview, mtu_payload: int = DEFAULT_MTU_PAYLOAD
) -> list[Submessage]:
    """One DATA if the payload fits, else ceil(len / mtu_payload) DATA_FRAGs."""
    return list(iter_fragments(sample, payload, mtu_payload))


# ---------- reassembly ----------
@dataclass
class ReassemblyBuffer:
    key: tuple
    total_len: int
    frag_count: int
    frag_size: int
    storage: bytearray
    received: bytearray
    received_count: int = 0
    last_progress_ns: int = 0
    expires: bool = True


class Reassembler:
    """
    Collects DATA_FRAGs per (guid_prefix, writer_id, sequence).

    Duplicates are ignored, fragments may arrive in any order and keys may be
    interleaved. A recently completed key is remembered so a late duplicate
    cannot start a second copy of the same sample.
    """

    def __init__(self, expiry_ns: int = 5_000_000_000, remember: int = 4096, clock=time.monotonic_ns):
        self.expiry_ns = expiry_ns
        self.clock = clock
        self._buffers: dict[tuple, ReassemblyBuffer] = {}
        self._completed: OrderedDict[tuple, None] = OrderedDict()
        self._remember = remember
        self.bytes_in_use = 0
        self.expired = 0

    def reassemble(self, guid_prefix: bytes, frag: DataFrag, expires: bool = True) -> bytes | None:
        """Returns the sample bytes once the last missing fragment lands, else None."""
        key = (guid_prefix, frag.topic_id, frag.writer_id, frag.sequence)
        if key in self._completed:
            return None
        buf = self._buffers.get(key)
        if buf is None:
            buf = ReassemblyBuffer(
                key=key,
                total_len=frag.total_len,
                frag_count=frag.frag_count,
                frag_size=frag.frag_size,
                storage=bytearray(frag.total_len),
                received=bytearray(frag.frag_count),
                expires=expires,
            )
            self._buffers[key] = buf
            self.bytes_in_use += frag.total_len
        elif (buf.total_len, buf.frag_count, buf.frag_size) != (
            frag.total_len,
            frag.frag_count,
            frag.frag_size,
        ):
            raise FragMetadataMismatch(
                f"fragment {frag.frag_index} of seq {frag.sequence} disagrees on geometry"
            )
        buf.last_progress_ns = self.clock()
        if buf.received[frag.frag_index]:
            return None
        start = frag.frag_index * frag.frag_size
        buf.storage[start : start + len(frag.payload)] = frag.payload
        buf.received[frag.frag_index] = 1
        buf.received_count += 1
        if buf.received_count < buf.frag_count:
            return None
        del self._buffers[key]
        self.bytes_in_use -= buf.total_len
        self._completed[key] = None
        if len(self._completed) > self._remember:
            self._completed.popitem(last=False)
        return bytes(buf.storage)

    def expire(self, now_ns: int | None = None) -> int:
        """Drop expiring buffers that made no progress within expiry_ns."""
        now = self.clock() if now_ns is None else now_ns
        stale = [
            key
            for key, buf in self._buffers.items()
            if buf.expires and now - buf.last_progress_ns > self.expiry_ns
        ]
        for key in stale:
            self.bytes_in_use -= self._buffers.pop(key).total_len
        self.expired += len(stale)
        if stale:
            logger.debug(f"expired {len(stale)} incomplete reassemblies")
        return len(stale)

    def forget(self, key_prefix: tuple) -> None:
        """Discard state for a (guid_prefix, topic_id, writer_id) once it is no longer needed."""
        for key in [k for k in self._buffers if k[:3] == key_prefix]:
            self.bytes_in_use -= self._buffers.pop(key).total_len

    @property
    def pending(self) -> int:
        return len(self._buffers)
