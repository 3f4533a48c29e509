"""
DDS entities and the data path.

DdsLibrary is one runtime instance of the protected library: participants,
topics, writers, readers and waitsets live in its shared heap, sample payloads
live in permanent regions, and every public operation runs as one bounded
library call.

Local delivery is single copy: a writer hands its block to the library and
each reader copies it straight into its own region during take. With eager
notification on, waitsets are woken before the deliverer finishes its own
work so that wakeup latency overlaps with the remaining delivery steps.

Network traffic (when a transport is attached) flows through the same
delivery path. Outbound datagrams are queued and drained in bounded chunks by
whichever thread happens to be inside the library: the writer, the daemon or
an application thread that polled.
"""

import itertools
import logging
import threading
import time
import uuid
import zlib
from collections import Counter, deque
from collections.abc import Callable, Iterator, Sequence
from contextlib import ExitStack, contextmanager
from dataclasses import dataclass, field
from enum import Enum
from functools import partial

from .buffers import (
    DEFAULT_REGION_LIMIT,
    DEFAULT_REGION_SIZE,
    GRANULE_SIZE,
    BlockHeader,
    BlockRef,
    BlockStatus,
    PermanentArena,
    PermanentRegion,
    Side,
    validate_offset,
)
from .errors import (
    BackpressureFull,
    BufferFull,
    ContextViolation,
    DomainBusError,
    DuplicateTopicName,
    FragMetadataMismatch,
    HeapExhausted,
    InvalidBlock,
    MalformedMessage,
    OwnershipViolation,
    QosMismatch,
)
from .heap import Descriptor, EntityKind, SharedHeap
from .reliability import (
    RemoteWriterState,
    RetransmitJob,
    SampleTxJob,
    WriterProxy,
    on_acknack,
    on_heartbeat,
)
from .runtime import DomainContext, DomainRuntime, Mode, ProcessIdentity, TimeBoundPolicy
from .transport import Datagram, Endpoint, Transport, poll_rx
from .waitword import NotifyCount, WaitWord, notify, prepare_wait, wait_outside
from .wire import (
    DEFAULT_MTU_PAYLOAD,
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
)

logger = logging.getLogger(__name__)

MAX_TOPIC_NAME_BYTES = 255


class Reliability(Enum):
    BEST_EFFORT = "best_effort"
    RELIABLE = "reliable"


class HistoryKind(Enum):
    KEEP_ALL = "keep_all"
    KEEP_LAST = "keep_last"


class Durability(Enum):
    VOLATILE = "volatile"
    TRANSIENT_LOCAL = "transient_local"


@dataclass(frozen=True)
class QosProfile:
    reliability: Reliability = Reliability.RELIABLE
    history: HistoryKind = HistoryKind.KEEP_ALL
    depth: int = 0
    durability: Durability = Durability.VOLATILE

    def __post_init__(self):
        if self.history is HistoryKind.KEEP_LAST and self.depth <= 0:
            raise ValueError(f"KeepLast history needs depth > 0, got {self.depth}")

    @property
    def reliable(self) -> bool:
        return self.reliability is Reliability.RELIABLE


class LibraryConfig:
    """Knobs of one library instance."""

    def __init__(
        self,
        eager_notify: bool = True,
        receipt_capacity: int = 1024,
        reliable_window: int = 512,
        mtu_payload: int = DEFAULT_MTU_PAYLOAD,
        tx_budget: int = 16,
        rx_batch: int = 16,
        spin_limit_ns: int = 2_000_000,
        copy_chunk: int = 64 * 1024,
        heap_slots_per_kind: int = 4096,
        region_size: int = DEFAULT_REGION_SIZE,
        region_limit: int = DEFAULT_REGION_LIMIT,
        granule_size: int = GRANULE_SIZE,
        wake_cost_ns: int = 0,
        reassembly_expiry_ns: int = 5_000_000_000,
        trace: bool = False,
        time_bound: TimeBoundPolicy | None = None,
    ):
        for name, value in (
            ("receipt_capacity", receipt_capacity),
            ("reliable_window", reliable_window),
            ("mtu_payload", mtu_payload),
            ("tx_budget", tx_budget),
            ("rx_batch", rx_batch),
            ("spin_limit_ns", spin_limit_ns),
            ("copy_chunk", copy_chunk),
        ):
            if value <= 0:
                raise ValueError(f"{name} must be > 0, got {value}")
        if wake_cost_ns < 0:
            raise ValueError(f"wake_cost_ns must be >= 0, got {wake_cost_ns}")
        self.eager_notify = eager_notify
        self.receipt_capacity = receipt_capacity
        self.reliable_window = reliable_window
        self.mtu_payload = mtu_payload
        self.tx_budget = tx_budget
        self.rx_batch = rx_batch
        self.spin_limit_ns = spin_limit_ns
        self.copy_chunk = copy_chunk
        self.heap_slots_per_kind = heap_slots_per_kind
        self.region_size = region_size
        self.region_limit = region_limit
        self.granule_size = granule_size
        self.wake_cost_ns = wake_cost_ns
        self.reassembly_expiry_ns = reassembly_expiry_ns
        self.trace = trace
        self.time_bound = time_bound or TimeBoundPolicy()


# ---------- records ----------
@dataclass(frozen=True)
class SampleHeader:
    writer: Descriptor | None
    sequence: int
    length: int
    timestamp: int
    block_ref: BlockRef


@dataclass(frozen=True)
class MessageReceipt:
    topic: Descriptor
    block_ref: BlockRef
    sequence: int
    sample_len: int
    timestamp: int
    sample: Descriptor


@dataclass(frozen=True)
class TakenSample:
    length: int
    sequence: int
    timestamp: int
    block_ref: BlockRef


@dataclass(frozen=True)
class TraceEvent:
    kind: str
    reader: int
    sequence: int
    thread: int
    t_ns: int


# ---------- entity bodies ----------
@dataclass
class ParticipantBody:
    pid: int


@dataclass(eq=False)
class TopicBody:
    name: str
    topic_id: int
    max_sample_len: int
    qos: QosProfile
    participant: Descriptor
    readers: list = field(default_factory=list)
    writers: list = field(default_factory=list)
    peers: list = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


@dataclass(eq=False)
class WriterBody:
    topic: Descriptor
    topic_body: TopicBody
    participant: Descriptor
    writer_id: int
    next_seq: int = 1
    last_sent: int = 0
    history: deque = field(default_factory=deque)
    proxies: dict = field(default_factory=dict)
    # reliable sequences some peer has not acknowledged yet
    awaiting: dict = field(default_factory=dict)
    ack_requested: bool = False
    heartbeat_due_ns: int | None = None
    heartbeat_count: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


@dataclass(eq=False)
class WaitsetBody:
    owner_pid: int
    readers: list
    word: WaitWord


@dataclass(eq=False)
class ReaderBody:
    topic: Descriptor
    topic_body: TopicBody
    participant: Descriptor
    owner_pid: int
    capacity: int
    slot: int = -1
    queue: deque = field(default_factory=deque)
    # deliveries between notify and receipt append
    inflight: int = 0
    waitsets: list = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


@dataclass
class SampleBody:
    header: SampleHeader
    topic_id: int


class DdsLibrary:
    """
    One runtime instance: entity heap, permanent arena, and (optionally) a
    transport endpoint shared with remote instances.
    """

    def __init__(
        self,
        config: LibraryConfig | None = None,
        transport: Transport | None = None,
        endpoint: Endpoint | None = None,
        runtime: DomainRuntime | None = None,
    ):
        self.config = config or LibraryConfig()
        cfg = self.config
        self.runtime = runtime or DomainRuntime(cfg.time_bound)
        self.heap = SharedHeap(self.runtime, cfg.heap_slots_per_kind)
        self.arena = PermanentArena(
            self.runtime,
            region_size=cfg.region_size,
            region_limit=cfg.region_limit,
            granule_size=cfg.granule_size,
            readiness_slots=cfg.heap_slots_per_kind,
        )
        self.transport = transport
        self.endpoint = endpoint
        self.rx_queue = transport.open(endpoint) if transport is not None and endpoint else None
        self.guid_prefix = uuid.uuid4().bytes[:12]
        # owns samples that arrive from the network
        self.system = self.runtime.register_process()

        self._registry_lock = threading.Lock()
        self._topics_by_name: dict[str, Descriptor] = {}
        self._topics_by_id: dict[int, Descriptor] = {}
        self._writers_by_id: dict[int, Descriptor] = {}
        self._writer_ids = itertools.count(1)

        self._remote_lock = threading.Lock()
        self._remote: dict[tuple, RemoteWriterState] = {}
        self._reassembly_lock = threading.Lock()
        self._reassembler = Reassembler(expiry_ns=cfg.reassembly_expiry_ns)

        self._tx_lock = threading.Lock()
        self._tx: deque = deque()

        self._counter_lock = threading.Lock()
        self.counters: Counter = Counter()
        self.trace: list[TraceEvent] = []

    # ---------- processes and contexts ----------
    def register_process(self) -> ProcessIdentity:
        return self.runtime.register_process()

    def context(self, identity: ProcessIdentity, trusted: bool = False) -> DomainContext:
        return self.runtime.new_context(identity, trusted=trusted)

    def terminate_process(self, pid: int) -> None:
        self.runtime.deregister_process(pid)

    def region(self, pid: int) -> PermanentRegion | None:
        """The application's direct view of its own permanent region."""
        return self.arena.primary(pid)

    @contextmanager
    def _call(self, ctx: DomainContext, name: str) -> Iterator[None]:
        with self.runtime.library_call(ctx, name):
            if self.arena.primary(ctx.pid) is None and self.runtime.is_alive(ctx.pid):
                self.arena.map_region(ctx, ctx.pid)
            yield

    def _count(self, name: str, n: int = 1) -> None:
        with self._counter_lock:
            self.counters[name] += n

    def _trace(self, kind: str, reader: Descriptor, sequence: int) -> None:
        if self.config.trace:
            self.trace.append(
                TraceEvent(kind, reader.index, sequence, threading.get_ident(), time.perf_counter_ns())
            )

    # ---------- entity creation ----------
    def create_participant(self, ctx: DomainContext) -> Descriptor:
        with self._call(ctx, "create_participant"):
            return self.heap.allocate_entity(
                ctx, EntityKind.PARTICIPANT, ctx.pid, ParticipantBody(ctx.pid)
            )

    def create_topic(
        self,
        ctx: DomainContext,
        participant: Descriptor,
        name: str,
        max_sample_len: int,
        qos: QosProfile | None = None,
    ) -> Descriptor:
        encoded = name.encode("utf-8")
        if not 0 < len(encoded) <= MAX_TOPIC_NAME_BYTES:
            raise ValueError(f"topic name must be 1..{MAX_TOPIC_NAME_BYTES} UTF-8 bytes")
        if max_sample_len <= 0:
            raise ValueError(f"max_sample_len must be > 0, got {max_sample_len}")
        qos = qos or QosProfile()
        with self._call(ctx, "create_topic"):
            self.heap.resolve_descriptor(ctx, participant, EntityKind.PARTICIPANT, ctx.pid)
            topic_id = zlib.crc32(encoded)
            with self._registry_lock:
                if name in self._topics_by_name:
                    raise DuplicateTopicName(f"topic {name!r} already exists")
                if topic_id in self._topics_by_id:
                    raise DuplicateTopicName(f"topic {name!r} collides with an existing wire id")
                body = TopicBody(name, topic_id, max_sample_len, qos, participant)
                desc = self.heap.allocate_entity(
                    ctx,
                    EntityKind.TOPIC,
                    ctx.pid,
                    body,
                    finalizer=partial(self._drop_topic, name, topic_id),
                )
                self._topics_by_name[name] = desc
                self._topics_by_id[topic_id] = desc
        logger.debug(f"created topic {name!r} (wire id {topic_id:#010x})")
        return desc

    def find_topic(self, ctx: DomainContext, name: str) -> Descriptor | None:
        """Topics are a shared rendezvous: any process may look one up by name."""
        with self._call(ctx, "find_topic"):
            with self._registry_lock:
                return self._topics_by_name.get(name)

    def _shared_topic(self, ctx: DomainContext, topic: Descriptor) -> TopicBody:
        return self.heap.resolve_descriptor(
            ctx, topic, EntityKind.TOPIC, ctx.pid, ownership_required=False
        ).body

    @staticmethod
    def _check_qos(tb: TopicBody, qos: QosProfile | None) -> None:
        if qos is not None and qos != tb.qos:
            raise QosMismatch(f"topic {tb.name!r} is {tb.qos}, endpoint asked for {qos}")

    def create_writer(
        self,
        ctx: DomainContext,
        participant: Descriptor,
        topic: Descriptor,
        qos: QosProfile | None = None,
    ) -> Descriptor:
        with self._call(ctx, "create_writer"):
            self.heap.resolve_descriptor(ctx, participant, EntityKind.PARTICIPANT, ctx.pid)
            tb = self._shared_topic(ctx, topic)
            self._check_qos(tb, qos)
            body = WriterBody(topic, tb, participant, writer_id=next(self._writer_ids))
            with tb.lock:
                for peer in tb.peers:
                    body.proxies[peer] = WriterProxy(peer, tb.qos.reliable)
            desc = self.heap.allocate_entity(ctx, EntityKind.WRITER, ctx.pid, body)
            self.heap.set_finalizer(desc, partial(self._drop_writer, desc, body))
            with tb.lock:
                tb.writers.append(desc)
            with self._registry_lock:
                self._writers_by_id[body.writer_id] = desc
            return desc

    def create_reader(
        self,
        ctx: DomainContext,
        participant: Descriptor,
        topic: Descriptor,
        qos: QosProfile | None = None,
    ) -> Descriptor:
        with self._call(ctx, "create_reader"):
            self.heap.resolve_descriptor(ctx, participant, EntityKind.PARTICIPANT, ctx.pid)
            tb = self._shared_topic(ctx, topic)
            self._check_qos(tb, qos)
            body = ReaderBody(topic, tb, participant, ctx.pid, self.config.receipt_capacity)
            desc = self.heap.allocate_entity(ctx, EntityKind.READER, ctx.pid, body)
            body.slot = desc.index
            self.heap.set_finalizer(desc, partial(self._drop_reader, desc, body))
            with tb.lock:
                writers = [self.heap.get(w).body for w in tb.writers]
            # writers are held still so no sample is both replayed and delivered
            with ExitStack() as stack:
                for wb in writers:
                    stack.enter_context(wb.lock)
                with tb.lock:
                    tb.readers.append(desc)
                if tb.qos.durability is Durability.TRANSIENT_LOCAL:
                    self._replay_history(ctx, desc, body, writers)
            self._publish_readiness(body)
            return desc

    def _replay_history(
        self, ctx: DomainContext, reader: Descriptor, rb: ReaderBody, writers: list[WriterBody]
    ) -> None:
        for wb in writers:
            for sdesc in wb.history:
                header = self.heap.get(sdesc).body.header
                self.heap.retain_sample(ctx, sdesc)
                receipt = MessageReceipt(
                    rb.topic, header.block_ref, header.sequence, header.length, header.timestamp, sdesc
                )
                with rb.lock:
                    rb.queue.append(receipt)
        if rb.queue:
            logger.debug(f"replayed {len(rb.queue)} historical samples to reader {reader.index}")

    def create_waitset(self, ctx: DomainContext, readers: Sequence[Descriptor]) -> Descriptor:
        with self._call(ctx, "create_waitset"):
            bodies = [
                self.heap.resolve_descriptor(ctx, r, EntityKind.READER, ctx.pid).body for r in readers
            ]
            ws = WaitsetBody(ctx.pid, list(readers), WaitWord(wake_cost_ns=self.config.wake_cost_ns))
            desc = self.heap.allocate_entity(
                ctx, EntityKind.WAITSET, ctx.pid, ws, finalizer=partial(self._drop_waitset, ws)
            )
            for rb in bodies:
                with rb.lock:
                    rb.waitsets.append(ws)
            return desc

    def add_peer(self, ctx: DomainContext, topic: Descriptor, peer: Endpoint) -> None:
        """Statically configure a remote instance that receives this topic."""
        if self.transport is not None:
            peer = self.transport.resolve(peer)
        with self._call(ctx, "add_peer"):
            tb = self.heap.resolve_descriptor(ctx, topic, EntityKind.TOPIC, ctx.pid).body
            with tb.lock:
                if peer in tb.peers:
                    return
                tb.peers.append(peer)
                writers = list(tb.writers)
            for wdesc in writers:
                wb = self.heap.get(wdesc).body
                with wb.lock:
                    wb.proxies.setdefault(peer, WriterProxy(peer, tb.qos.reliable))
        logger.info(f"🔗 topic {tb.name!r} now sends to {peer}")

    # ---------- deletion ----------
    def _delete(self, ctx: DomainContext, desc: Descriptor, kind: EntityKind) -> None:
        with self._call(ctx, f"delete_{kind.value}"):
            self.heap.resolve_descriptor(ctx, desc, kind, ctx.pid)
            self.heap.free_entity(ctx, desc)

    def delete_writer(self, ctx: DomainContext, writer: Descriptor) -> None:
        self._delete(ctx, writer, EntityKind.WRITER)

    def delete_reader(self, ctx: DomainContext, reader: Descriptor) -> None:
        self._delete(ctx, reader, EntityKind.READER)

    def delete_waitset(self, ctx: DomainContext, waitset: Descriptor) -> None:
        self._delete(ctx, waitset, EntityKind.WAITSET)

    def delete_topic(self, ctx: DomainContext, topic: Descriptor) -> None:
        self._delete(ctx, topic, EntityKind.TOPIC)

    def delete_participant(self, ctx: DomainContext, participant: Descriptor) -> None:
        """Delete a participant together with the topics, writers and readers it created."""
        order = (EntityKind.WAITSET, EntityKind.READER, EntityKind.WRITER, EntityKind.TOPIC)
        with self._call(ctx, "delete_participant"):
            self.heap.resolve_descriptor(ctx, participant, EntityKind.PARTICIPANT, ctx.pid)
            owned = self.heap.owned_by(ctx.pid)
            for kind in order:
                for desc in sorted((d for d in owned if d.kind is kind), key=lambda d: d.index):
                    if not self.heap.is_live(desc):
                        continue
                    body = self.heap.get(desc).body
                    if kind is EntityKind.WAITSET or getattr(body, "participant", None) == participant:
                        self.heap.free_entity(ctx, desc)
            self.heap.free_entity(ctx, participant)

    # finalizers run inside the library, after the heap lock is dropped
    def _drop_topic(self, name: str, topic_id: int, ctx: DomainContext) -> None:
        with self._registry_lock:
            self._topics_by_name.pop(name, None)
            self._topics_by_id.pop(topic_id, None)
        with self._remote_lock:
            stale = [key for key in self._remote if key[1] == topic_id]
            for key in stale:
                del self._remote[key]
        with self._reassembly_lock:
            for key in stale:
                self._reassembler.forget(key)

    def _drop_writer(self, desc: Descriptor, wb: WriterBody, ctx: DomainContext) -> None:
        with wb.topic_body.lock:
            if desc in wb.topic_body.writers:
                wb.topic_body.writers.remove(desc)
        with self._registry_lock:
            self._writers_by_id.pop(wb.writer_id, None)
        with wb.lock:
            history = list(wb.history)
            wb.history.clear()
            awaiting = dict(wb.awaiting)
            wb.awaiting.clear()
            peers = list(wb.proxies)
            wb.proxies.clear()
        for sample in history:
            self.heap.release_sample(ctx, sample)
        for sample in awaiting.values():
            for peer in peers:
                self.heap.settle_sample(ctx, sample, peer)

    def _drop_reader(self, desc: Descriptor, rb: ReaderBody, ctx: DomainContext) -> None:
        with rb.topic_body.lock:
            if desc in rb.topic_body.readers:
                rb.topic_body.readers.remove(desc)
        for ws in list(rb.waitsets):
            if desc in ws.readers:
                ws.readers.remove(desc)
        with rb.lock:
            receipts = list(rb.queue)
            rb.queue.clear()
            rb.waitsets.clear()
        for receipt in receipts:
            self.heap.release_sample(ctx, receipt.sample)
        self._publish_readiness(rb)

    def _drop_waitset(self, ws: WaitsetBody, ctx: DomainContext) -> None:
        for reader in list(ws.readers):
            if self.heap.is_live(reader):
                rb = self.heap.get(reader).body
                with rb.lock:
                    if ws in rb.waitsets:
                        rb.waitsets.remove(ws)

    def _free_sample_block(self, ref: BlockRef, ctx: DomainContext) -> None:
        self.arena.free_block(ref)

    # ---------- application blocks ----------
    def _app_block(
        self, ctx: DomainContext, ref: BlockRef, length: int = 0
    ) -> tuple[PermanentRegion, BlockHeader]:
        region = self.arena.primary(ctx.pid)
        if (
            ref.pid != ctx.pid
            or region is None
            or not region.mapped
            or ref.region_offset != region.arena_offset
        ):
            raise InvalidBlock(f"block {ref} is not in the caller's region")
        if not validate_offset(region, ref.offset, length):
            raise InvalidBlock(f"block {ref} with length {length} lies outside the region")
        return region, region.block(ref.offset)

    def alloc_block(self, ctx: DomainContext, length: int) -> BlockRef:
        return self.alloc_blocks(ctx, length, 1)[0]

    def alloc_blocks(self, ctx: DomainContext, length: int, count: int) -> list[BlockRef]:
        with self._call(ctx, "alloc_block"):
            region = self.arena.ensure_primary(ctx, ctx.pid)
            refs = []
            try:
                for _ in range(count):
                    refs.append(region.alloc_block(length, Side.APPLICATION).ref)
            except BufferFull:
                for ref in refs:
                    region.free_block(region.block(ref.offset))
                raise
            return refs

    def mark_ready(self, ctx: DomainContext, ref: BlockRef, length: int) -> None:
        with self._call(ctx, "mark_ready"):
            region, block = self._app_block(ctx, ref, length)
            if block.owner is not Side.APPLICATION:
                raise OwnershipViolation(f"block {ref} belongs to the library")
            region.mark_ready(block, length)

    def free_block(self, ctx: DomainContext, ref: BlockRef) -> None:
        self.free_blocks(ctx, [ref])

    def free_blocks(self, ctx: DomainContext, refs: Sequence[BlockRef]) -> None:
        with self._call(ctx, "free_block"):
            for ref in refs:
                region, block = self._app_block(ctx, ref)
                if block.owner is not Side.APPLICATION:
                    raise OwnershipViolation(f"block {ref} belongs to the library")
                region.free_block(block)

    # ---------- write ----------
    def write(self, ctx: DomainContext, writer: Descriptor, block_ref: BlockRef, length: int) -> int:
        """Publish a READY application block. Returns the sample's sequence number."""
        with self._call(ctx, "write"):
            wb = self.heap.resolve_descriptor(ctx, writer, EntityKind.WRITER, ctx.pid).body
            sequence = self._write_one(ctx, writer, wb, block_ref, length)
            self._flush_tx(ctx, self.config.tx_budget)
        self._kick_if_backlog()
        return sequence

    def write_many(
        self, ctx: DomainContext, writer: Descriptor, blocks: Sequence[tuple[BlockRef, int]]
    ) -> list[int]:
        """Publish several blocks in one crossing. Stops at the first error."""
        with self._call(ctx, "write_many"):
            wb = self.heap.resolve_descriptor(ctx, writer, EntityKind.WRITER, ctx.pid).body
            sequences = [self._write_one(ctx, writer, wb, ref, length) for ref, length in blocks]
            self._flush_tx(ctx, self.config.tx_budget)
        self._kick_if_backlog()
        return sequences

    def _write_one(
        self, ctx: DomainContext, writer: Descriptor, wb: WriterBody, ref: BlockRef, length: int
    ) -> int:
        tb = wb.topic_body
        region, block = self._app_block(ctx, ref, length)
        if (
            block.owner is not Side.APPLICATION
            or block.status is not BlockStatus.READY
            or block.sample_len != length
            or not 0 < length <= tb.max_sample_len
        ):
            raise InvalidBlock(
                f"block {ref} is {block.owner.name}/{block.status.name} with {block.sample_len} B; "
                f"write needs an APPLICATION READY block of {length} B (max {tb.max_sample_len})"
            )
        with wb.lock:
            self._check_backpressure(tb, wb)
            sequence = wb.next_seq
            header = SampleHeader(writer, sequence, length, time.time_ns(), block.ref)
            sample = self.heap.allocate_entity(
                ctx,
                EntityKind.SAMPLE,
                ctx.pid,
                SampleBody(header, tb.topic_id),
                finalizer=partial(self._free_sample_block, block.ref),
            )
            region.transfer_block(block, Side.LIBRARY, Side.APPLICATION)
            wb.next_seq += 1
            peers = list(wb.proxies) if self.transport is not None else []
            if tb.qos.reliable and peers:
                self.heap.add_pending_peers(sample, set(peers))
                wb.awaiting[sequence] = sample
            if tb.qos.durability is Durability.TRANSIENT_LOCAL:
                self.heap.retain_sample(ctx, sample)
                wb.history.append(sample)
                if tb.qos.history is HistoryKind.KEEP_LAST and len(wb.history) > tb.qos.depth:
                    self.heap.release_sample(ctx, wb.history.popleft())
            self.deliver_local(ctx, tb, sample, header)
            if peers:
                self._enqueue_sample_tx(ctx, wb, sample, header, region.read(block.offset, length), peers)
        self.heap.settle_sample(ctx, sample)
        logger.debug(f"wrote seq {sequence} ({length} B) on {tb.name!r}")
        return sequence

    def _check_backpressure(self, tb: TopicBody, wb: WriterBody) -> None:
        if not tb.qos.reliable:
            return
        if tb.qos.history is HistoryKind.KEEP_ALL:
            for proxy in wb.proxies.values():
                if len(proxy) >= self.config.reliable_window:
                    self._count("backpressure")
                    raise BackpressureFull(f"{len(proxy)} unacknowledged samples for {proxy.peer}")
        for reader in list(tb.readers):
            rb = self.heap.get(reader).body
            if len(rb.queue) + rb.inflight >= rb.capacity:
                self._count("backpressure")
                raise BackpressureFull(f"receipt queue of reader {reader.index} is full")

    # ---------- local delivery ----------
    def deliver_local(
        self,
        ctx: DomainContext,
        tb: TopicBody,
        sample: Descriptor,
        header: SampleHeader,
        fill: Callable[[], None] | None = None,
    ) -> list[Descriptor]:
        """
        Hand a sample to every subscribed reader.

        Eager order: publish readiness, notify waitsets, retain, append receipts,
        then run `fill` (the copy that completes the sample's block). Without
        eager notification the block is completed first and waitsets are
        notified last.
        """
        DomainRuntime.require_mode(ctx, Mode.LIBRARY, "deliver_local")
        with tb.lock:
            readers = list(tb.readers)
        if not readers:
            if fill is not None:
                fill()
            return []
        bodies = [(r, self.heap.get(r).body) for r in readers]
        eager = self.config.eager_notify
        if not eager and fill is not None:
            fill()
        for _, rb in bodies:
            with rb.lock:
                rb.inflight += 1
            self._publish_readiness(rb)
        if eager:
            self._notify_waitsets(ctx, bodies, header.sequence)
        self.heap.retain_sample(ctx, sample, len(bodies))
        for reader, rb in bodies:
            receipt = MessageReceipt(
                rb.topic, header.block_ref, header.sequence, header.length, header.timestamp, sample
            )
            self._append_receipt(ctx, reader, rb, receipt)
        if eager and fill is not None:
            fill()
        if not eager:
            self._notify_waitsets(ctx, bodies, header.sequence)
        self._count("deliveries", len(bodies))
        # readiness + append per reader, one retain for all of them
        self._count("deliver_ops", 2 * len(bodies) + 1)
        return readers

    def _notify_waitsets(self, ctx: DomainContext, bodies: list, sequence: int) -> None:
        seen = set()
        for reader, rb in bodies:
            for ws in list(rb.waitsets):
                self._trace("notify", reader, sequence)
                if id(ws) in seen:
                    continue
                seen.add(id(ws))
                notify(ctx, ws.word, NotifyCount.ALL)
                self._count("notifies")

    def _append_receipt(
        self, ctx: DomainContext, reader: Descriptor, rb: ReaderBody, receipt: MessageReceipt
    ) -> None:
        dropped = None
        with rb.lock:
            # reliable writers checked capacity before delivering
            if len(rb.queue) >= rb.capacity and not rb.topic_body.qos.reliable:
                dropped = rb.queue.popleft()
            rb.queue.append(receipt)
            rb.inflight -= 1
        self._trace("append", reader, receipt.sequence)
        self._publish_readiness(rb)
        if dropped is not None:
            self._count("receipts_dropped")
            self.heap.release_sample(ctx, dropped.sample)

    def _publish_readiness(self, rb: ReaderBody) -> None:
        region = self.arena.primary(rb.owner_pid)
        if region is not None and region.mapped:
            region.publish_readiness(rb.slot, len(rb.queue) + rb.inflight)

    # ---------- take ----------
    def take(
        self,
        ctx: DomainContext,
        reader: Descriptor,
        dest_blocks: Sequence[BlockRef],
        max_samples: int = 1,
    ) -> list[TakenSample]:
        """Copy up to max_samples pending samples into the caller's EMPTY blocks, in order."""
        with self._call(ctx, "take"):
            rb = self.heap.resolve_descriptor(ctx, reader, EntityKind.READER, ctx.pid).body
            dests = []
            for ref in list(dest_blocks)[: max(0, max_samples)]:
                region, block = self._app_block(ctx, ref)
                if block.owner is not Side.APPLICATION or block.status is not BlockStatus.EMPTY:
                    raise InvalidBlock(f"destination {ref} must be an EMPTY application block")
                if any(d is block for d in dests):
                    raise InvalidBlock(f"destination {ref} given twice")
                dests.append(block)
            if not rb.queue and not rb.inflight and self.rx_queue is not None:
                self._poll_rx(ctx)
            region = self.arena.primary(ctx.pid)
            taken = []
            for block in dests:
                try:
                    receipt = self._next_receipt(rb, block.capacity)
                except InvalidBlock:
                    if taken:
                        break
                    raise
                if receipt is None:
                    break
                if not self._copy_sample(receipt, region, block):
                    with rb.lock:
                        rb.queue.appendleft(receipt)
                    break
                region.mark_ready(block, receipt.sample_len)
                self._trace("take", reader, receipt.sequence)
                self.heap.release_sample(ctx, receipt.sample)
                taken.append(
                    TakenSample(receipt.sample_len, receipt.sequence, receipt.timestamp, block.ref)
                )
            self._publish_readiness(rb)
            return taken

    def _next_receipt(self, rb: ReaderBody, capacity: int) -> MessageReceipt | None:
        deadline = None
        while True:
            with rb.lock:
                if rb.queue:
                    if rb.queue[0].sample_len > capacity:
                        raise InvalidBlock(
                            f"next sample is {rb.queue[0].sample_len} B, destination holds {capacity} B"
                        )
                    return rb.queue.popleft()
                if not rb.inflight:
                    return None
            # a deliverer sits between notify and append; it cannot be preempted for long
            now = time.perf_counter_ns()
            if deadline is None:
                deadline = now + self.config.spin_limit_ns
            elif now > deadline:
                return None
            time.sleep(0)

    def _copy_sample(self, receipt: MessageReceipt, dest: PermanentRegion, block: BlockHeader) -> bool:
        """The single copy: source block to destination block, following the watermark."""
        src_region = self.arena.region_for(receipt.block_ref)
        src = src_region.block(receipt.block_ref.offset)
        n = receipt.sample_len
        copied = 0
        deadline = None
        while copied < n:
            mark = src.watermark
            if mark > copied:
                dest.write(block.offset + copied, src_region.read(src.offset + copied, mark - copied))
                copied = mark
                continue
            now = time.perf_counter_ns()
            if deadline is None:
                deadline = now + self.config.spin_limit_ns
            elif now > deadline:
                logger.debug(f"gave up waiting for seq {receipt.sequence} to be filled")
                return False
            time.sleep(0)
        self._count("copies")
        return True

    def take_fast_path(self, ctx: DomainContext, reader: Descriptor) -> bool:
        """Application-side check of the advisory readiness counter. No crossing."""
        if ctx.mode is Mode.LIBRARY:
            raise ContextViolation("take_fast_path is an application-side check")
        region = self.arena.primary(ctx.pid)
        return region is not None and region.read_readiness(reader.index) > 0

    # ---------- waitsets ----------
    def waitset_wait(
        self, ctx: DomainContext, waitset: Descriptor, timeout_ns: int
    ) -> list[Descriptor]:
        """Readers of the waitset with pending samples; empty on timeout."""
        if ctx.mode is Mode.LIBRARY:
            raise ContextViolation("waitset_wait blocks and must be called from the application")
        deadline = time.monotonic_ns() + timeout_ns
        while True:
            with self._call(ctx, "waitset_wait"):
                ws = self.heap.resolve_descriptor(ctx, waitset, EntityKind.WAITSET, ctx.pid).body
                # snapshot first: any delivery that starts later moves the word
                directive = prepare_wait(ctx, ws.word)
                ready = self._triggered(ws)
                if not ready and self.rx_queue is not None and self._poll_rx(ctx):
                    ready = self._triggered(ws)
            if ready:
                return ready
            remaining = deadline - time.monotonic_ns()
            if remaining <= 0:
                return []
            wait_outside(ctx, directive, remaining)

    def _triggered(self, ws: WaitsetBody) -> list[Descriptor]:
        ready = []
        for reader in list(ws.readers):
            if not self.heap.is_live(reader):
                continue
            rb = self.heap.get(reader).body
            if rb.queue or rb.inflight:
                ready.append(reader)
        return ready

    # ---------- application-side conveniences ----------
    def publish(self, ctx: DomainContext, writer: Descriptor, data: bytes) -> int:
        """Allocate, fill, mark ready and write one sample."""
        ref = self.alloc_block(ctx, len(data))
        self.arena.primary(ctx.pid).write(ref.offset, data)
        self.mark_ready(ctx, ref, len(data))
        try:
            return self.write(ctx, writer, ref, len(data))
        except DomainBusError:
            self.free_block(ctx, ref)
            raise

    def take_payloads(
        self,
        ctx: DomainContext,
        reader: Descriptor,
        capacity: int,
        max_samples: int = 1,
        fast_path: bool = True,
    ) -> list[tuple[TakenSample, bytes]]:
        """Take into scratch blocks and return copies of the payloads."""
        if fast_path and not self.take_fast_path(ctx, reader):
            return []
        refs = self.alloc_blocks(ctx, capacity, max_samples)
        try:
            taken = self.take(ctx, reader, refs, max_samples)
            region = self.arena.primary(ctx.pid)
            return [(t, bytes(region.read(t.block_ref.offset, t.length))) for t in taken]
        finally:
            self.free_blocks(ctx, refs)

    # ---------- transmission ----------
    def _send(self, peer: Endpoint, datagram: bytes) -> None:
        self.transport.send(self.endpoint, peer, datagram)
        self._count("datagrams_sent")

    def _enqueue_sample_tx(
        self,
        ctx: DomainContext,
        wb: WriterBody,
        sample: Descriptor,
        header: SampleHeader,
        payload: memoryview,
        peers: list[Endpoint],
    ) -> None:
        tb = wb.topic_body
        self.heap.retain_sample(ctx, sample)
        job = SampleTxJob(
            WireSample(tb.topic_id, wb.writer_id, header.sequence, header.timestamp),
            payload,
            peers,
            self.guid_prefix,
            self.config.mtu_payload,
            on_done=partial(self._sample_sent, wb, header.sequence, sample),
        )
        for peer in peers:
            proxy = wb.proxies[peer]
            if tb.qos.reliable and tb.qos.history is HistoryKind.KEEP_LAST:
                while len(proxy) >= self.config.reliable_window:
                    evicted = proxy.evict_oldest()
                    self._acked(ctx, wb, peer, evicted)
            proxy.record_sent(header.sequence, job.datagrams)
        with self._tx_lock:
            self._tx.append(job)
        if tb.qos.reliable and not wb.ack_requested:
            # ask for an early ACKNACK once a peer's window is half used
            for proxy in wb.proxies.values():
                if len(proxy) >= self.config.reliable_window // 2:
                    wb.ack_requested = True
                    self._send_heartbeat(wb, proxy)
                    self._count("heartbeats_piggybacked")

    def _sample_sent(self, wb: WriterBody, sequence: int, sample: Descriptor, ctx: DomainContext) -> None:
        wb.last_sent = max(wb.last_sent, sequence)
        self.heap.release_sample(ctx, sample)

    def _flush_tx(self, ctx: DomainContext, budget: int) -> int:
        if self.transport is None:
            return 0
        sent = 0
        finished = []
        with self._tx_lock:
            while sent < budget and self._tx:
                job = self._tx[0]
                datagram = job.next_datagram()
                targets = job.peers if isinstance(job, SampleTxJob) else [job.peer]
                for peer in targets:
                    self._send(peer, datagram)
                sent += 1
                if job.done:
                    self._tx.popleft()
                    finished.append(job)
        for job in finished:
            if isinstance(job, SampleTxJob) and job.on_done is not None:
                job.on_done(ctx)
        return sent

    def flush_tx(self, ctx: DomainContext, budget: int | None = None) -> int:
        """Drain up to `budget` queued datagrams. Returns how many were sent."""
        with self._call(ctx, "flush_tx"):
            return self._flush_tx(ctx, budget or self.config.tx_budget)

    @property
    def tx_backlog(self) -> int:
        with self._tx_lock:
            return len(self._tx)

    def _kick_if_backlog(self) -> None:
        if self.transport is not None and self._tx:
            self.transport.kick(self.endpoint)

    # ---------- heartbeats ----------
    def _send_heartbeat(self, wb: WriterBody, proxy: WriterProxy) -> None:
        hb = Heartbeat(
            wb.topic_body.topic_id,
            wb.writer_id,
            proxy.first_unacked(wb.last_sent),
            wb.last_sent,
            wb.heartbeat_count,
        )
        self._send(proxy.peer, encode(Message(MessageHeader(self.guid_prefix), (hb,))))

    def send_heartbeats(self, ctx: DomainContext, now_ns: int, period_ns: int) -> int:
        """One HEARTBEAT round per reliable writer with peers whose period elapsed."""
        with self._call(ctx, "send_heartbeats"):
            sent = 0
            if self.transport is None:
                return sent
            with self._registry_lock:
                writers = list(self._writers_by_id.values())
            for wdesc in writers:
                if not self.heap.is_live(wdesc):
                    continue
                wb = self.heap.get(wdesc).body
                if not wb.topic_body.qos.reliable or not wb.proxies:
                    continue
                with wb.lock:
                    if wb.heartbeat_due_ns is None:
                        wb.heartbeat_due_ns = now_ns + period_ns
                        continue
                    if now_ns < wb.heartbeat_due_ns:
                        continue
                    wb.heartbeat_due_ns += period_ns
                    if wb.heartbeat_due_ns <= now_ns:
                        wb.heartbeat_due_ns = now_ns + period_ns
                    wb.heartbeat_count += 1
                    for proxy in wb.proxies.values():
                        self._send_heartbeat(wb, proxy)
                sent += 1
            self._count("heartbeats", sent)
            return sent

    def next_heartbeat_due(self) -> int | None:
        with self._registry_lock:
            writers = list(self._writers_by_id.values())
        due = [
            self.heap.get(w).body.heartbeat_due_ns
            for w in writers
            if self.heap.is_live(w) and self.heap.get(w).body.heartbeat_due_ns is not None
        ]
        return min(due, default=None)

    # ---------- reception ----------
    def _poll_rx(self, ctx: DomainContext) -> int:
        """Work sharing: any thread in the library may drain the RX queue for everyone."""
        datagrams = poll_rx(self.rx_queue, self.config.rx_batch)
        processed = self._process_rx_batch(ctx, datagrams) if datagrams else 0
        self._flush_tx(ctx, self.config.tx_budget)
        return processed

    def process_rx_batch(self, ctx: DomainContext, datagrams: Sequence[Datagram]) -> int:
        with self._call(ctx, "process_rx_batch"):
            return self._process_rx_batch(ctx, datagrams)

    def _process_rx_batch(self, ctx: DomainContext, datagrams: Sequence[Datagram]) -> int:
        processed = 0
        for datagram in datagrams:
            try:
                message = decode(datagram.payload)
            except MalformedMessage as e:
                self._count("rx_malformed")
                logger.warning(f"⚠️ dropped malformed datagram from {datagram.source}: {e}")
                continue
            for sub in message.submessages:
                try:
                    self._dispatch(ctx, message.header.guid_prefix, sub, datagram.source)
                except (MalformedMessage, FragMetadataMismatch) as e:
                    self._count("rx_malformed")
                    logger.warning(f"⚠️ rejected submessage from {datagram.source}: {e}")
                except DomainBusError as e:
                    self._count("rx_failed")
                    logger.warning(f"⚠️ could not handle submessage from {datagram.source}: {e!r}")
            processed += 1
        self._count("rx_processed", processed)
        return processed

    def _dispatch(self, ctx: DomainContext, guid: bytes, sub, source: Endpoint) -> None:
        if isinstance(sub, Data):
            tb = self._topic_by_id(sub.topic_id)
            if tb is not None:
                state = self._remote_state(guid, tb, sub.writer_id)
                self._on_sample(ctx, tb, state, sub.sequence, sub.timestamp, sub.payload)
        elif isinstance(sub, DataFrag):
            tb = self._topic_by_id(sub.topic_id)
            if tb is None:
                return
            state = self._remote_state(guid, tb, sub.writer_id)
            if state.is_duplicate(sub.sequence):
                return
            with self._reassembly_lock:
                payload = self._reassembler.reassemble(guid, sub, expires=not tb.qos.reliable)
            if payload is not None:
                self._on_sample(ctx, tb, state, sub.sequence, sub.timestamp, payload)
        elif isinstance(sub, Heartbeat):
            self._on_heartbeat(ctx, guid, sub, source)
        elif isinstance(sub, AckNack):
            self._on_acknack(ctx, sub, source)

    def _topic_by_id(self, topic_id: int) -> TopicBody | None:
        with self._registry_lock:
            desc = self._topics_by_id.get(topic_id)
        if desc is None or not self.heap.is_live(desc):
            return None
        return self.heap.get(desc).body

    def _remote_state(self, guid: bytes, tb: TopicBody, writer_id: int) -> RemoteWriterState:
        key = (guid, tb.topic_id, writer_id)
        with self._remote_lock:
            state = self._remote.get(key)
            if state is None:
                state = RemoteWriterState(key, reliable=tb.qos.reliable)
                self._remote[key] = state
            return state

    def _on_sample(
        self,
        ctx: DomainContext,
        tb: TopicBody,
        state: RemoteWriterState,
        sequence: int,
        timestamp: int,
        payload: bytes,
    ) -> None:
        with state.lock:
            if not state.offer(sequence, (timestamp, payload)):
                return
            self._release_in_order(ctx, tb, state)

    def _release_in_order(self, ctx: DomainContext, tb: TopicBody, state: RemoteWriterState) -> None:
        while (ready := state.pop_ready()) is not None:
            sequence, (timestamp, payload) = ready
            try:
                delivered = self._deliver_remote(ctx, tb, sequence, timestamp, payload)
            except DomainBusError:
                if state.reliable:
                    state.push_back(sequence, (timestamp, payload))
                raise
            if not delivered:
                if state.reliable:
                    # not acknowledged, so the writer will resend it
                    state.push_back(sequence, (timestamp, payload))
                break

    def _deliver_remote(
        self, ctx: DomainContext, tb: TopicBody, sequence: int, timestamp: int, payload: bytes
    ) -> bool:
        with tb.lock:
            readers = list(tb.readers)
        if not readers:
            return True
        if tb.qos.reliable:
            for reader in readers:
                rb = self.heap.get(reader).body
                if len(rb.queue) + rb.inflight >= rb.capacity:
                    self._count("rx_deferred")
                    return False
        region = self.arena.ensure_primary(ctx, self.system.pid)
        try:
            # an empty sample still needs a block to carry its receipt
            block = region.alloc_block(max(len(payload), 1), Side.LIBRARY)
        except BufferFull:
            self._count("rx_deferred")
            return False
        region.mark_writing(block, len(payload))
        header = SampleHeader(None, sequence, len(payload), timestamp, block.ref)
        try:
            sample = self.heap.allocate_entity(
                ctx,
                EntityKind.SAMPLE,
                self.system.pid,
                SampleBody(header, tb.topic_id),
                finalizer=partial(self._free_sample_block, block.ref),
            )
        except HeapExhausted:
            region.free_block(block)
            self._count("rx_deferred")
            return False
        self.deliver_local(ctx, tb, sample, header, fill=partial(self._fill_block, region, block, payload))
        self.heap.settle_sample(ctx, sample)
        return True

    def _fill_block(self, region: PermanentRegion, block: BlockHeader, payload: bytes) -> None:
        chunk = self.config.copy_chunk
        view = memoryview(payload)
        for start in range(0, len(payload), chunk):
            piece = view[start : start + chunk]
            region.write(block.offset + start, piece)
            region.advance_watermark(block, len(piece))
        region.mark_ready(block, len(payload))

    def _on_heartbeat(self, ctx: DomainContext, guid: bytes, hb: Heartbeat, source: Endpoint) -> None:
        tb = self._topic_by_id(hb.topic_id)
        if tb is None or not tb.readers:
            return
        state = self._remote_state(guid, tb, hb.writer_id)
        with state.lock:
            reply = on_heartbeat(state, hb)
            self._release_in_order(ctx, tb, state)
        if reply is not None:
            self._send(source, encode(Message(MessageHeader(self.guid_prefix), (reply,))))
            self._count("acknacks_sent")

    def _on_acknack(self, ctx: DomainContext, an: AckNack, source: Endpoint) -> None:
        with self._registry_lock:
            wdesc = self._writers_by_id.get(an.reader_id)
        if wdesc is None or not self.heap.is_live(wdesc):
            return
        wb = self.heap.get(wdesc).body
        if wb.topic_body.topic_id != an.topic_id or not wb.topic_body.qos.reliable:
            return
        with wb.lock:
            proxy = wb.proxies.get(source)
            if proxy is None:
                return
            resend = on_acknack(proxy, an, partial(self._acked, ctx, wb, source))
            wb.ack_requested = False
            if resend:
                with self._tx_lock:
                    self._tx.append(RetransmitJob(source, resend))
                self._count("retransmits", len(resend))

    def _acked(self, ctx: DomainContext, wb: WriterBody, peer: Endpoint, sequence: int | None) -> None:
        sample = wb.awaiting.get(sequence)
        if sample is None:
            return
        self.heap.settle_sample(ctx, sample, peer)
        if all(sequence not in p.unacked for p in wb.proxies.values()):
            del wb.awaiting[sequence]

    # ---------- housekeeping ----------
    def reclaim_dead_processes(self, ctx: DomainContext) -> int:
        """Free what terminated processes left behind. Returns the entity count."""
        with self._call(ctx, "reclaim"):
            reclaimed = 0
            for pid in self.runtime.pop_terminations():
                reclaimed += self.heap.reclaim_process_resources(ctx, pid)
                self.arena.retire(ctx, pid)
            return reclaimed

    def expire_reassembly(self, ctx: DomainContext, now_ns: int | None = None) -> int:
        with self._call(ctx, "expire_reassembly"):
            with self._reassembly_lock:
                return self._reassembler.expire(now_ns)

    def snapshot(self) -> dict[str, int]:
        """Counters plus live entity counts, for reports and tests."""
        with self._counter_lock:
            data = dict(self.counters)
        data.update({f"live_{k}": v for k, v in self.heap.stats().items()})
        data["tx_backlog"] = self.tx_backlog
        return data
