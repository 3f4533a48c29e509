"""
Protected heap: descriptor-addressed entity storage.

Fixed-capacity slot tables per kind give constant-time allocation that never
waits. Descriptors carry a generation; a slot's generation is bumped on both
allocation and free, so a descriptor to a freed slot never resolves again.
Finalizers (releasing receipts, freeing buffer blocks) run after the heap lock
is dropped.
"""

import logging
import threading
from collections.abc import Callable
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from .errors import (
    HeapExhausted,
    KindMismatch,
    OwnershipViolation,
    StaleDescriptor,
    UnderflowViolation,
)
from .runtime import DomainContext, DomainRuntime, Mode

logger = logging.getLogger(__name__)

DEFAULT_SLOTS_PER_KIND = 1024
GENERATION_MASK = 0xFFFFFFFF


class EntityKind(Enum):
    PARTICIPANT = "participant"
    TOPIC = "topic"
    WRITER = "writer"
    READER = "reader"
    WAITSET = "waitset"
    SAMPLE = "sample"


@dataclass(frozen=True)
class Descriptor:
    kind: EntityKind
    index: int
    generation: int


@dataclass
class EntityHeader:
    owner_pid: int
    kind: EntityKind
    generation: int
    body: Any = None
    refcount: int = 0
    # peers that must acknowledge a sample before its block may be freed
    pending_peers: set = field(default_factory=set)
    finalizer: Callable[[DomainContext], None] | None = field(default=None, repr=False)
    live: bool = True


class _SlotTable:
    def __init__(self, capacity: int):
        self.slots: list[EntityHeader | None] = [None] * capacity
        self.generations = [0] * capacity
        self.free = list(range(capacity - 1, -1, -1))
        self.lock = threading.Lock()


class SharedHeap:
    """Entity storage with ownership checks and sample reference counting."""

    def __init__(self, runtime: DomainRuntime, slots_per_kind: int = DEFAULT_SLOTS_PER_KIND):
        if slots_per_kind <= 0:
            raise ValueError(f"slots_per_kind must be > 0, got {slots_per_kind}")
        self.runtime = runtime
        self.slots_per_kind = slots_per_kind
        self._tables = {kind: _SlotTable(slots_per_kind) for kind in EntityKind}
        self._owned: dict[int, set[Descriptor]] = {}
        self._owned_lock = threading.Lock()

    # ---------- allocation ----------
    def allocate_entity(
        self,
        ctx: DomainContext,
        kind: EntityKind,
        owner_pid: int,
        body: Any = None,
        finalizer: Callable[[DomainContext], None] | None = None,
    ) -> Descriptor:
        DomainRuntime.require_mode(ctx, Mode.LIBRARY, "allocate_entity")
        if not self.runtime.is_alive(owner_pid):
            raise OwnershipViolation(f"owner pid {owner_pid} is not alive")
        table = self._tables[kind]
        with table.lock:
            if not table.free:
                raise HeapExhausted(f"no free {kind.value} slots")
            index = table.free.pop()
            generation = (table.generations[index] + 1) & GENERATION_MASK
            table.generations[index] = generation
            table.slots[index] = EntityHeader(
                owner_pid=owner_pid,
                kind=kind,
                generation=generation,
                body=body,
                finalizer=finalizer,
            )
        desc = Descriptor(kind, index, generation)
        with self._owned_lock:
            self._owned.setdefault(owner_pid, set()).add(desc)
        return desc

    def set_finalizer(self, desc: Descriptor, finalizer: Callable[[DomainContext], None] | None) -> None:
        self._lookup(desc).finalizer = finalizer

    # ---------- access ----------
    def _lookup(self, desc: Descriptor) -> EntityHeader:
        table = self._tables[desc.kind]
        if not 0 <= desc.index < self.slots_per_kind:
            raise StaleDescriptor(f"descriptor index {desc.index} out of range")
        entry = table.slots[desc.index]
        if entry is None or table.generations[desc.index] != desc.generation:
            raise StaleDescriptor(f"stale {desc.kind.value} descriptor {desc.index}")
        return entry

    def resolve_descriptor(
        self,
        ctx: DomainContext,
        desc: Descriptor,
        expected_kind: EntityKind,
        caller_pid: int,
        ownership_required: bool = True,
    ) -> EntityHeader:
        """Return the entity iff kind, generation and (optionally) ownership all check out."""
        DomainRuntime.require_mode(ctx, Mode.LIBRARY, "resolve_descriptor")
        if not isinstance(desc, Descriptor):
            raise StaleDescriptor(f"not a descriptor: {desc!r}")
        if desc.kind is not expected_kind:
            raise KindMismatch(f"expected {expected_kind.value}, got {desc.kind.value}")
        entry = self._lookup(desc)
        if ownership_required:
            if entry.owner_pid != caller_pid:
                raise OwnershipViolation(
                    f"pid {caller_pid} does not own {desc.kind.value} {desc.index}"
                )
            if not self.runtime.is_alive(entry.owner_pid):
                raise OwnershipViolation(f"owner pid {entry.owner_pid} is dead")
        return entry

    def get(self, desc: Descriptor) -> EntityHeader:
        """Unchecked lookup for library-internal references (still generation checked)."""
        return self._lookup(desc)

    def is_live(self, desc: Descriptor) -> bool:
        try:
            self._lookup(desc)
        except StaleDescriptor:
            return False
        return True

    # ---------- freeing ----------
    def free_entity(self, ctx: DomainContext, desc: Descriptor) -> None:
        DomainRuntime.require_mode(ctx, Mode.LIBRARY, "free_entity")
        finalizer = self._detach(desc)
        if finalizer is not None:
            finalizer(ctx)

    def _detach(self, desc: Descriptor) -> Callable[[DomainContext], None] | None:
        table = self._tables[desc.kind]
        with table.lock:
            entry = self._detach_locked(table, desc)
        return self._forget(desc, entry)

    @staticmethod
    def _detach_locked(table: _SlotTable, desc: Descriptor) -> EntityHeader:
        entry = table.slots[desc.index]
        if entry is None or table.generations[desc.index] != desc.generation:
            raise StaleDescriptor(f"stale {desc.kind.value} descriptor {desc.index}")
        entry.live = False
        table.slots[desc.index] = None
        table.generations[desc.index] = (desc.generation + 1) & GENERATION_MASK
        table.free.append(desc.index)
        return entry

    def _forget(self, desc: Descriptor, entry: EntityHeader) -> Callable[[DomainContext], None] | None:
        with self._owned_lock:
            owned = self._owned.get(entry.owner_pid)
            if owned is not None:
                owned.discard(desc)
                if not owned:
                    del self._owned[entry.owner_pid]
        return entry.finalizer

    # ---------- sample reference counting ----------
    def retain_sample(self, ctx: DomainContext, desc: Descriptor, n: int = 1) -> int:
        DomainRuntime.require_mode(ctx, Mode.LIBRARY, "retain_sample")
        if desc.kind is not EntityKind.SAMPLE:
            raise KindMismatch(f"retain on {desc.kind.value}")
        table = self._tables[EntityKind.SAMPLE]
        with table.lock:
            entry = self._lookup(desc)
            entry.refcount += n
            return entry.refcount

    def release_sample(self, ctx: DomainContext, desc: Descriptor) -> int:
        """Drop one reference; frees the sample once unreferenced and fully acknowledged."""
        DomainRuntime.require_mode(ctx, Mode.LIBRARY, "release_sample")
        if desc.kind is not EntityKind.SAMPLE:
            raise KindMismatch(f"release on {desc.kind.value}")
        table = self._tables[EntityKind.SAMPLE]
        with table.lock:
            entry = self._lookup(desc)
            if entry.refcount <= 0:
                raise UnderflowViolation(f"sample {desc.index} released below zero")
            entry.refcount -= 1
            remaining = entry.refcount
        if remaining == 0:
            self.settle_sample(ctx, desc)
        return remaining

    def add_pending_peers(self, desc: Descriptor, peers: set) -> None:
        table = self._tables[EntityKind.SAMPLE]
        with table.lock:
            self._lookup(desc).pending_peers.update(peers)

    def settle_sample(self, ctx: DomainContext, desc: Descriptor, acked_peer: Any = None) -> bool:
        """
        Record an acknowledgment (if given) and free the sample when nothing holds it.

        Returns True if the sample was freed by this call.
        """
        DomainRuntime.require_mode(ctx, Mode.LIBRARY, "settle_sample")
        table = self._tables[EntityKind.SAMPLE]
        with table.lock:
            entry = table.slots[desc.index]
            if entry is None or table.generations[desc.index] != desc.generation:
                return False
            if acked_peer is not None:
                entry.pending_peers.discard(acked_peer)
            if entry.refcount or entry.pending_peers:
                return False
            self._detach_locked(table, desc)
        finalizer = self._forget(desc, entry)
        if finalizer is not None:
            finalizer(ctx)
        return True

    # ---------- reclamation ----------
    def reclaim_process_resources(self, ctx: DomainContext, dead_pid: int) -> int:
        """Free everything owned by a dead pid; pinned samples survive until released."""
        DomainRuntime.require_mode(ctx, Mode.LIBRARY, "reclaim_process_resources")
        if self.runtime.is_alive(dead_pid):
            return 0
        with self._owned_lock:
            owned = sorted(self._owned.get(dead_pid, ()), key=_reclaim_order)
        for desc in owned:
            if desc.kind is EntityKind.SAMPLE:
                self.settle_sample(ctx, desc)
                continue
            try:
                finalizer = self._detach(desc)
            except StaleDescriptor:
                continue
            if finalizer is not None:
                finalizer(ctx)
        # finalizers may free more of the owner's samples than the loop did itself
        remaining = self.owned_by(dead_pid)
        reclaimed = sum(1 for desc in owned if desc not in remaining)
        if reclaimed:
            logger.info(f"🧹 reclaimed {reclaimed} entities of dead pid {dead_pid}")
        return reclaimed

    # ---------- inspection ----------
    def scan(self) -> list[tuple[Descriptor, EntityHeader]]:
        found = []
        for kind, table in self._tables.items():
            with table.lock:
                for index, entry in enumerate(table.slots):
                    if entry is not None:
                        found.append((Descriptor(kind, index, entry.generation), entry))
        return found

    def owned_by(self, pid: int) -> set[Descriptor]:
        with self._owned_lock:
            return set(self._owned.get(pid, ()))

    def live_count(self, kind: EntityKind) -> int:
        table = self._tables[kind]
        with table.lock:
            return self.slots_per_kind - len(table.free)

    def stats(self) -> dict[str, int]:
        return {kind.value: self.live_count(kind) for kind in EntityKind}


# Readers go before samples so released receipts can unpin dead writers' samples.
_RECLAIM_ORDER = {
    EntityKind.WAITSET: 0,
    EntityKind.READER: 1,
    EntityKind.WRITER: 2,
    EntityKind.TOPIC: 3,
    EntityKind.PARTICIPANT: 4,
    EntityKind.SAMPLE: 5,
}


def _reclaim_order(desc: Descriptor) -> tuple[int, int]:
    return (_RECLAIM_ORDER[desc.kind], desc.index)
