"""
Permanently mapped transfer regions.

Each process gets a region in a shared namespace. The application reads and
writes its own region directly; only library-mode code may unmap it, so a
library copy can never fault because the owner pulled the mapping away.

Block metadata has two copies: the authoritative BlockHeader kept here (the
protected heap side) and an advisory record written into the region's advisory
area for the application's fast paths. Library code writes the advisory copy
and never reads it back.
"""

import logging
import mmap
import struct
import threading
from dataclasses import dataclass
from enum import Enum

from .errors import (
    BlocksInUse,
    BufferFull,
    InvalidBlock,
    InvalidStateTransition,
    OwnershipViolation,
    PermissionDenied,
    ReservationLimitExceeded,
)
from .runtime import DomainContext, DomainRuntime, Mode

logger = logging.getLogger(__name__)

GRANULE_SIZE = 4096
DEFAULT_REGION_SIZE = 16 * 1024 * 1024
DEFAULT_REGION_LIMIT = 64 * 1024 * 1024

# status u8, owner u8, pad, sample_len u32, watermark u32, granules u32
ADVISORY_RECORD = struct.Struct("<BBxxIII")
READINESS_COUNTER = struct.Struct("<I")


class Side(Enum):
    APPLICATION = 1
    LIBRARY = 2


class BlockStatus(Enum):
    EMPTY = 0
    WRITING = 1
    READY = 2


@dataclass(frozen=True)
class BlockRef:
    pid: int
    offset: int
    region_offset: int = 0


@dataclass
class BlockHeader:
    region_pid: int
    offset: int
    granules: int
    capacity: int
    owner: Side
    status: BlockStatus = BlockStatus.EMPTY
    sample_len: int = 0
    watermark: int = 0
    region_offset: int = 0

    @property
    def ref(self) -> BlockRef:
        return BlockRef(self.region_pid, self.offset, self.region_offset)


def validate_offset(region: "PermanentRegion", offset: int, length: int) -> bool:
    """True iff [offset, offset + length) lies inside the region."""
    if offset < 0 or length < 0:
        return False
    return offset <= region.size and length <= region.size - offset


class PermanentRegion:
    """One process's transfer region plus its granule allocator."""

    def __init__(
        self,
        owner_pid: int,
        size: int,
        arena_offset: int,
        granule_size: int = GRANULE_SIZE,
        readiness_slots: int = 0,
    ):
        self.owner_pid = owner_pid
        self.base = 0
        self.size = size
        self.arena_offset = arena_offset
        self.granule_size = granule_size
        self.granule_count = size // granule_size
        self.mapped = True
        self.retired = False
        # anonymous mapping: zero pages are materialized lazily, so mapping stays O(1)
        self.memory = mmap.mmap(-1, size)
        self._readiness_base = self.granule_count * ADVISORY_RECORD.size
        self.advisory = bytearray(self._readiness_base + readiness_slots * READINESS_COUNTER.size)
        self.readiness_slots = readiness_slots
        self._table = bytearray(self.granule_count)
        self._blocks: dict[int, BlockHeader] = {}
        self._lock = threading.Lock()

    # ---------- checked access ----------
    def _check(self, offset: int, length: int) -> None:
        if not self.mapped:
            raise InvalidBlock(f"region of pid {self.owner_pid} is unmapped")
        if not validate_offset(self, offset, length):
            raise InvalidBlock(f"[{offset}, {offset}+{length}) outside region of {self.size} B")

    def read(self, offset: int, length: int) -> memoryview:
        self._check(offset, length)
        return memoryview(self.memory)[offset : offset + length]

    def write(self, offset: int, data: bytes | memoryview) -> None:
        self._check(offset, len(data))
        self.memory[offset : offset + len(data)] = data

    # ---------- allocator ----------
    def alloc_block(self, length: int, requester: Side) -> BlockHeader:
        """First fit over the granule table. Never waits: a full region raises BufferFull."""
        if length <= 0:
            raise InvalidBlock(f"block length must be > 0, got {length}")
        need = -(-length // self.granule_size)
        with self._lock:
            if not self.mapped:
                raise InvalidBlock(f"region of pid {self.owner_pid} is unmapped")
            start = self._table.find(bytes(need)) if need <= self.granule_count else -1
            if start < 0:
                raise BufferFull(f"no run of {need} free granules in region of pid {self.owner_pid}")
            self._table[start : start + need] = b"\x01" * need
            offset = start * self.granule_size
            block = BlockHeader(
                region_pid=self.owner_pid,
                offset=offset,
                granules=need,
                capacity=need * self.granule_size,
                owner=requester,
                region_offset=self.arena_offset,
            )
            self._blocks[offset] = block
            self._publish(block)
        return block

    def block(self, offset: int) -> BlockHeader:
        """Authoritative header of the block starting at offset."""
        block = self._blocks.get(offset)
        if block is None:
            raise InvalidBlock(f"no block at offset {offset} in region of pid {self.owner_pid}")
        return block

    def transfer_block(self, block: BlockHeader, new_owner: Side, caller: Side) -> None:
        with self._lock:
            self._require_live(block)
            if block.owner is not caller:
                raise OwnershipViolation(f"{caller.name} does not own block {block.offset}")
            block.owner = new_owner
            self._publish(block)

    def mark_writing(self, block: BlockHeader, sample_len: int) -> None:
        with self._lock:
            self._require_live(block)
            if block.status is not BlockStatus.EMPTY:
                raise InvalidStateTransition(f"{block.status.name} -> WRITING")
            if not 0 <= sample_len <= block.capacity:
                raise InvalidStateTransition(f"sample_len {sample_len} exceeds block capacity")
            block.status = BlockStatus.WRITING
            block.sample_len = sample_len
            block.watermark = 0
            self._publish(block)

    def advance_watermark(self, block: BlockHeader, n: int) -> int:
        with self._lock:
            self._require_live(block)
            if block.status is not BlockStatus.WRITING:
                raise InvalidStateTransition(f"advance_watermark in {block.status.name}")
            if n < 0 or block.watermark + n > block.sample_len:
                raise InvalidStateTransition(
                    f"watermark {block.watermark}+{n} beyond sample_len {block.sample_len}"
                )
            block.watermark += n
            self._publish(block)
            return block.watermark

    def mark_ready(self, block: BlockHeader, sample_len: int) -> None:
        """EMPTY -> READY (whole sample already written) or WRITING -> READY."""
        with self._lock:
            self._require_live(block)
            if block.status is BlockStatus.READY:
                raise InvalidStateTransition("block already READY")
            if not 0 <= sample_len <= block.capacity:
                raise InvalidStateTransition(f"sample_len {sample_len} out of block capacity")
            if block.status is BlockStatus.WRITING and sample_len != block.sample_len:
                raise InvalidStateTransition("sample_len differs from the one being written")
            block.status = BlockStatus.READY
            block.sample_len = sample_len
            block.watermark = sample_len
            self._publish(block)

    def free_block(self, block: BlockHeader) -> None:
        with self._lock:
            self._require_live(block)
            del self._blocks[block.offset]
            start = block.offset // self.granule_size
            self._table[start : start + block.granules] = bytes(block.granules)
            block.status = BlockStatus.EMPTY
            block.sample_len = block.watermark = 0
            ADVISORY_RECORD.pack_into(self.advisory, start * ADVISORY_RECORD.size, 0, 0, 0, 0, 0)

    def _require_live(self, block: BlockHeader) -> None:
        if self._blocks.get(block.offset) is not block:
            raise InvalidStateTransition(f"block {block.offset} is not allocated")

    def _publish(self, block: BlockHeader) -> None:
        index = block.offset // self.granule_size
        ADVISORY_RECORD.pack_into(
            self.advisory,
            index * ADVISORY_RECORD.size,
            block.status.value,
            block.owner.value,
            block.sample_len,
            block.watermark,
            block.granules,
        )

    # ---------- reader readiness (advisory) ----------
    def publish_readiness(self, slot: int, pending: int) -> None:
        if 0 <= slot < self.readiness_slots:
            READINESS_COUNTER.pack_into(
                self.advisory,
                self._readiness_base + slot * READINESS_COUNTER.size,
                min(pending, 0xFFFFFFFF),
            )

    def read_readiness(self, slot: int) -> int:
        if not 0 <= slot < self.readiness_slots:
            return 0
        (pending,) = READINESS_COUNTER.unpack_from(
            self.advisory, self._readiness_base + slot * READINESS_COUNTER.size
        )
        return pending

    def read_advisory_block(self, offset: int) -> tuple[int, int, int, int, int]:
        """Application-side view of a block record; may be arbitrary if the app scribbled it."""
        index = offset // self.granule_size
        return ADVISORY_RECORD.unpack_from(self.advisory, index * ADVISORY_RECORD.size)

    # ---------- inspection ----------
    @property
    def allocated_granules(self) -> int:
        return self.granule_count - self._table.count(0)

    @property
    def free_granules(self) -> int:
        return self._table.count(0)

    def blocks(self) -> list[BlockHeader]:
        with self._lock:
            return list(self._blocks.values())

    def check_invariants(self) -> None:
        """Disjointness, bounds and conservation; raises AssertionError on violation."""
        with self._lock:
            covered = bytearray(self.granule_count)
            for offset, block in self._blocks.items():
                assert offset == block.offset
                assert offset % self.granule_size == 0
                assert validate_offset(self, offset, block.capacity)
                assert block.watermark <= block.sample_len <= block.capacity
                start = offset // self.granule_size
                for g in range(start, start + block.granules):
                    assert covered[g] == 0, f"granule {g} allocated twice"
                    covered[g] = 1
            assert covered == self._table, "granule table disagrees with block list"
            assert self.free_granules + self.allocated_granules == self.size // self.granule_size


class PermanentArena:
    """
    Shared namespace of permanent regions.

    Assigns each region a disjoint range, enforces the per-process reservation
    limit, and unmaps a dead process's region once its last block is freed.
    """

    def __init__(
        self,
        runtime: DomainRuntime,
        region_size: int = DEFAULT_REGION_SIZE,
        region_limit: int = DEFAULT_REGION_LIMIT,
        granule_size: int = GRANULE_SIZE,
        readiness_slots: int = 0,
    ):
        if granule_size <= 0 or granule_size & (granule_size - 1):
            raise ValueError(f"granule_size must be a power of two, got {granule_size}")
        if region_size <= 0 or region_size % granule_size:
            raise ValueError(f"region_size must be a positive multiple of {granule_size}")
        self.runtime = runtime
        self.region_size = region_size
        self.region_limit = region_limit
        self.granule_size = granule_size
        self.readiness_slots = readiness_slots
        self._lock = threading.Lock()
        self._next_offset = 0
        self._regions: dict[int, list[PermanentRegion]] = {}

    def map_region(self, ctx: DomainContext, owner_pid: int, size: int | None = None) -> PermanentRegion:
        DomainRuntime.require_mode(ctx, Mode.LIBRARY, "map_region")
        size = self.region_size if size is None else size
        if size <= 0 or size % self.granule_size:
            raise ValueError(f"region size must be a positive multiple of {self.granule_size}")
        with self._lock:
            reserved = sum(r.size for r in self._regions.get(owner_pid, ()) if r.mapped)
            if reserved + size > self.region_limit:
                raise ReservationLimitExceeded(
                    f"pid {owner_pid}: {reserved} + {size} B exceeds limit {self.region_limit} B"
                )
            region = PermanentRegion(
                owner_pid,
                size,
                arena_offset=self._next_offset,
                granule_size=self.granule_size,
                readiness_slots=self.readiness_slots,
            )
            self._next_offset += size
            self._regions.setdefault(owner_pid, []).append(region)
        logger.debug(f"mapped {size} B region for pid {owner_pid} at {region.arena_offset}")
        return region

    def unmap_region(self, ctx: DomainContext, region: PermanentRegion) -> None:
        """Only library code may unmap; an application attempt leaves the region intact."""
        if ctx.mode is not Mode.LIBRARY:
            logger.warning(f"🚫 application-mode unmap attempt on region of pid {region.owner_pid}")
            raise PermissionDenied("permanent regions can only be unmapped by the library")
        with region._lock:
            busy = [
                b
                for b in region._blocks.values()
                if b.status is BlockStatus.WRITING or b.owner is Side.LIBRARY
            ]
            if busy:
                raise BlocksInUse(f"{len(busy)} blocks of pid {region.owner_pid} still in use")
            region.mapped = False
            region._blocks.clear()
            region._table[:] = bytes(region.granule_count)

    def change_permissions(self, ctx: DomainContext, region: PermanentRegion, writable: bool) -> None:
        if ctx.mode is not Mode.LIBRARY:
            raise PermissionDenied("permanent region permissions are fixed outside the library")
        # Permissions are modeled only as the unmapping defense; nothing else to change.

    def primary(self, pid: int) -> PermanentRegion | None:
        regions = self._regions.get(pid)
        return regions[0] if regions else None

    def ensure_primary(self, ctx: DomainContext, pid: int) -> PermanentRegion:
        region = self.primary(pid)
        if region is None:
            region = self.map_region(ctx, pid)
        return region

    def _holding(self, ref: BlockRef) -> PermanentRegion:
        with self._lock:
            for region in self._regions.get(ref.pid, ()):
                if region.arena_offset == ref.region_offset:
                    return region
        raise InvalidBlock(f"no region of pid {ref.pid} at arena offset {ref.region_offset}")

    def region_for(self, ref: BlockRef) -> PermanentRegion:
        """The region holding ref's block, whichever of the pid's regions that is."""
        region = self._holding(ref)
        if not region.mapped:
            raise InvalidBlock(f"region of pid {ref.pid} at {ref.region_offset} is unmapped")
        return region

    def free_block(self, ref: BlockRef) -> None:
        region = self._holding(ref)
        if not region.mapped:
            # unmapping already zeroed the granule table
            logger.warning(f"⚠️ block {ref.offset} of pid {ref.pid} freed after its region was unmapped")
            return
        region.free_block(region.block(ref.offset))
        if region.retired and not region._blocks:
            region.mapped = False
            logger.debug(f"unmapped retired region of pid {ref.pid}")

    def retire(self, ctx: DomainContext, pid: int) -> None:
        """Release a dead process's regions; busy ones go when their last block is freed."""
        DomainRuntime.require_mode(ctx, Mode.LIBRARY, "retire")
        for region in self._regions.get(pid, ()):
            with region._lock:
                region.retired = True
                # the dead application's own blocks are garbage now
                for block in [b for b in region._blocks.values() if b.owner is Side.APPLICATION]:
                    del region._blocks[block.offset]
                    start = block.offset // region.granule_size
                    region._table[start : start + block.granules] = bytes(block.granules)
                if not region._blocks:
                    region.mapped = False

    def reserved(self, pid: int) -> int:
        with self._lock:
            return sum(r.size for r in self._regions.get(pid, ()) if r.mapped)

    def regions(self) -> list[PermanentRegion]:
        with self._lock:
            return [r for regions in self._regions.values() for r in regions]

    def check_disjoint(self) -> None:
        spans = sorted((r.arena_offset, r.arena_offset + r.size) for r in self.regions())
        for (_, end), (start, _) in zip(spans, spans[1:]):
            assert end <= start, "permanent regions overlap"
