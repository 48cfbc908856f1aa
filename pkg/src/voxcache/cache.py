"""Two-tier block cache.

CPU tier: a bounded LRU map of decoded padded blocks. Texture tier: one large
3D voxel array partitioned into ``(B+2)**3`` slots, emulating the GPU cache
texture; the block-to-slot mapping, LRU order, and per-frame usage stamps all
live CPU-side. Blocks enter the texture only in :func:`process_loads`, called
at frame boundaries, so a frame always samples an immutable snapshot.

Eviction rule: least-recently-used slot whose ``last_used_frame`` differs from
the current frame. Slots touched this frame are never evicted; when every slot
is protected and none is free the upload fails with :class:`CacheFullError`
and the block simply stays missing for this frame.
"""

from __future__ import annotations

import logging
import math
import threading
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .pyramid import BlockData, BlockKey, BlockSource

log = logging.getLogger(__name__)


class CacheFullError(RuntimeError):
    """Raised when no slot is free and every occupied slot was used this frame."""


class CpuBlockCache:
    """Strict bounded LRU over decoded blocks; safe for concurrent access."""

    def __init__(self, capacity_blocks: int):
        if capacity_blocks < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity_blocks
        self._map: OrderedDict[BlockKey, BlockData] = OrderedDict()
        self._lock = threading.Lock()

    def get(self, key: BlockKey) -> BlockData | None:
        with self._lock:
            data = self._map.get(key)
            if data is not None:
                self._map.move_to_end(key)
            return data

    def put(self, key: BlockKey, data: BlockData) -> None:
        with self._lock:
            self._map[key] = data
            self._map.move_to_end(key)
            while len(self._map) > self.capacity:
                self._map.popitem(last=False)

    def __len__(self) -> int:
        with self._lock:
            return len(self._map)

    def __contains__(self, key: BlockKey) -> bool:
        with self._lock:
            return key in self._map

    @property
    def payload_bytes(self) -> int:
        with self._lock:
            return sum(d.payload.nbytes for d in self._map.values())


class CacheTexture:
    """Slot-partitioned 3D array with CPU-maintained mapping and LRU state."""

    def __init__(
        self,
        dims: tuple[int, int, int],
        block_size: int,
        dtype=np.uint8,
        record_evictions: bool = False,
    ):
        self.block_size = block_size
        self.slot_edge = block_size + 2
        if any(d % self.slot_edge for d in dims):
            raise ValueError(f"dims {dims} not divisible by slot edge {self.slot_edge}")
        self.dims = dims
        self.slot_grid = tuple(d // self.slot_edge for d in dims)
        self.n_slots = self.slot_grid[0] * self.slot_grid[1] * self.slot_grid[2]
        self.data = np.zeros((dims[2], dims[1], dims[0]), dtype=dtype)
        self.map: dict[BlockKey, int] = {}
        self.slots: list[BlockKey | None] = [None] * self.n_slots
        self.last_used_frame: list[int] = [-1] * self.n_slots
        self._lru: OrderedDict[int, None] = OrderedDict()  # oldest first
        self._next_free = 0
        self.evictions = 0
        self.eviction_log: list[BlockKey] | None = [] if record_evictions else None

    @classmethod
    def for_slots(
        cls, n_slots: int, block_size: int, dtype=np.uint8, record_evictions: bool = False
    ) -> "CacheTexture":
        """Texture sized to hold at least ``n_slots`` slots, near-cubic."""
        if n_slots < 1:
            raise ValueError("need at least one slot")
        e = block_size + 2
        nx = math.ceil(n_slots ** (1.0 / 3.0))
        while nx**3 < n_slots:  # guard against cube-root rounding
            nx += 1
        ny = math.ceil(math.sqrt(n_slots / nx))
        nz = math.ceil(n_slots / (nx * ny))
        return cls((nx * e, ny * e, nz * e), block_size, dtype, record_evictions=record_evictions)

    def slot_coords(self, slot_id: int) -> tuple[int, int, int]:
        gx, gy, _ = self.slot_grid
        return (slot_id % gx, (slot_id // gx) % gy, slot_id // (gx * gy))

    def slot_data_origin(self, slot_id: int) -> tuple[int, int, int]:
        """Texture voxel where the B^3 data region of a slot starts (pad shell around it)."""
        if not 0 <= slot_id < self.n_slots:
            raise ValueError(f"slot {slot_id} out of range")
        sx, sy, sz = self.slot_coords(slot_id)
        e = self.slot_edge
        return (sx * e + 1, sy * e + 1, sz * e + 1)

    def slot_of(self, key: BlockKey) -> int | None:
        return self.map.get(key)

    def is_resident(self, key: BlockKey) -> bool:
        return key in self.map

    @property
    def resident_count(self) -> int:
        return len(self.map)

    def _pick_slot(self, frame_id: int) -> int:
        if self._next_free < self.n_slots:
            slot = self._next_free
            self._next_free += 1
            return slot
        for slot in self._lru:  # oldest first
            if self.last_used_frame[slot] != frame_id:
                old = self.slots[slot]
                del self.map[old]
                del self._lru[slot]
                self.slots[slot] = None
                self.evictions += 1
                if self.eviction_log is not None:
                    self.eviction_log.append(old)
                return slot
        raise CacheFullError("all slots were used in the current frame")

    def upload(self, block: BlockData, frame_id: int) -> int:
        """Copy a padded payload into a slot (evicting LRU if needed); returns the slot."""
        e = self.slot_edge
        if block.payload.shape != (e, e, e):
            raise ValueError(f"payload shape {block.payload.shape} != {(e, e, e)}")
        existing = self.map.get(block.key)
        if existing is not None:
            slot = existing
            self._lru.move_to_end(slot)
        else:
            slot = self._pick_slot(frame_id)
            self.map[block.key] = slot
            self.slots[slot] = block.key
            self._lru[slot] = None
        x, y, z = self.slot_coords(slot)
        self.data[z * e : (z + 1) * e, y * e : (y + 1) * e, x * e : (x + 1) * e] = block.payload
        self.last_used_frame[slot] = frame_id
        return slot

    def mark_used(self, key: BlockKey, frame_id: int) -> bool:
        """Move a resident key to the most-recent LRU position; False if not resident."""
        slot = self.map.get(key)
        if slot is None:
            return False
        self._lru.move_to_end(slot)
        self.last_used_frame[slot] = frame_id
        return True


@dataclass
class CacheStats:
    """Per-frame cache activity, merged into the stats message."""

    resident_slots: int = 0
    evictions: int = 0
    pending_loads: int = 0
    cpu_hits: int = 0
    source_reads: int = 0
    load_errors: int = 0
    uploads: int = 0

    def as_dict(self) -> dict:
        return {
            "residentSlots": self.resident_slots,
            "evictions": self.evictions,
            "pendingLoads": self.pending_loads,
            "cpuHits": self.cpu_hits,
            "sourceReads": self.source_reads,
            "loadErrors": self.load_errors,
            "uploads": self.uploads,
        }


@dataclass(order=True)
class _Pending:
    priority: float
    seq: int


class LoadQueue:
    """Pending block requests ordered by priority (lower loads earlier), then FIFO."""

    def __init__(self):
        self._pending: dict[BlockKey, _Pending] = {}
        self.in_flight: set[BlockKey] = set()
        self._seq = 0

    def request(self, key: BlockKey, priority: float) -> None:
        """Enqueue unless already pending or in flight; duplicates keep the lower priority."""
        if key in self.in_flight:
            return
        entry = self._pending.get(key)
        if entry is not None:
            entry.priority = min(entry.priority, priority)
            return
        self._pending[key] = _Pending(priority, self._seq)
        self._seq += 1

    def take(self, budget: int) -> list[tuple[BlockKey, float]]:
        """Move up to ``budget`` highest-priority keys from pending to in-flight."""
        if budget <= 0 or not self._pending:
            return []
        order = sorted(self._pending.items(), key=lambda kv: kv[1])
        taken = [(k, p.priority) for k, p in order[:budget]]
        for k, _ in taken:
            del self._pending[k]
            self.in_flight.add(k)
        return taken

    def requeue(self, key: BlockKey, priority: float) -> None:
        self.in_flight.discard(key)
        self.request(key, priority)

    def complete(self, key: BlockKey) -> None:
        self.in_flight.discard(key)

    def drop(self, key: BlockKey) -> None:
        self._pending.pop(key, None)
        self.in_flight.discard(key)

    def __contains__(self, key: BlockKey) -> bool:
        return key in self._pending or key in self.in_flight

    def priority_of(self, key: BlockKey) -> float | None:
        entry = self._pending.get(key)
        return entry.priority if entry is not None else None

    @property
    def pending_count(self) -> int:
        return len(self._pending)


def request_block(queue: LoadQueue, key: BlockKey, priority: float) -> None:
    queue.request(key, priority)


def _resolve_source(sources, key: BlockKey) -> BlockSource:
    if isinstance(sources, BlockSource):
        return sources
    return sources[key.volume_id]


def process_loads(
    queue: LoadQueue,
    sources,
    cpu: CpuBlockCache,
    tex: CacheTexture,
    budget: int,
    frame_id: int,
    stats: CacheStats | None = None,
    workers: int = 0,
) -> list[BlockKey]:
    """Drain up to ``budget`` requests at a frame boundary; returns uploaded keys.

    ``sources`` is a single :class:`BlockSource` or a mapping of volume id to
    source. Blocks come from the CPU cache when possible, from the source
    otherwise. ``workers`` > 1 reads missing blocks through a thread pool
    before the (serial, priority-ordered) texture uploads, so results are
    identical to the inline path. Keys hitting a full texture return to
    pending; source read errors drop the key and the frame continues.
    """
    taken = queue.take(budget)
    if not taken:
        return []

    blocks: dict[BlockKey, BlockData] = {}
    misses: list[BlockKey] = []
    for key, _prio in taken:
        if tex.is_resident(key):
            queue.complete(key)
            continue
        data = cpu.get(key)
        if data is not None:
            if stats:
                stats.cpu_hits += 1
            blocks[key] = data
        else:
            misses.append(key)

    def load(key: BlockKey) -> tuple[BlockKey, BlockData | None]:
        try:
            return key, _resolve_source(sources, key).read(key)
        except Exception as exc:
            log.error("block load failed for %s: %s", key, exc)
            return key, None

    if workers > 1 and len(misses) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(load, misses))
    else:
        results = [load(k) for k in misses]
    for key, data in results:
        if stats:
            stats.source_reads += 1
        if data is None:
            queue.drop(key)
            if stats:
                stats.load_errors += 1
        else:
            cpu.put(key, data)
            blocks[key] = data

    uploaded: list[BlockKey] = []
    for key, prio in taken:
        data = blocks.get(key)
        if data is None:
            continue  # failed read or already resident
        try:
            tex.upload(data, frame_id)
        except CacheFullError:
            queue.requeue(key, prio)
            continue
        queue.complete(key)
        uploaded.append(key)
        if stats:
            stats.uploads += 1
    if stats:
        stats.resident_slots = tex.resident_count
        stats.pending_loads = queue.pending_count
    return uploaded
