"""Crash-consistent, type-tagged object allocator for one puddle heap.

Two levels: slab classes (16/32/64/128/256 B slots carved from 4 KiB pages)
for requests under 256 B, and a binary buddy (256 B minimum block, blocks
power-of-two sized and naturally aligned) for everything else including the
slab pages themselves.

Persistent state is deliberately minimal so every object is discoverable by
a metadata-only walk:

* a granule table at the end of the heap holds one 16 B record per 256 B
  granule of the buddy arena; a record at a block's first granule names the
  allocation kind, its size class or order, and the 64-bit type id;
* each slab page ends with a 48 B tail (type id, class, slot count,
  occupancy bitmap).

Free lists are volatile and re-derived from that metadata on open (and
after an abort): a standard buddy's free set is a pure function of the live
block set, so the derived lists match an explicitly simulated buddy.

Every metadata mutation goes through the caller-supplied transaction hooks
(undo log, then store), which is what makes alloc/free failure-atomic.
"""

import struct
from dataclasses import dataclass
from heapq import heappop, heappush
from typing import Iterator, Optional

import numpy as np

from .core import PuddleHeader
from .errors import BadSize, CorruptMetadata, DoubleFree, InvalidAddress

GRANULE = 256
GRANULE_REC = 16          # per-granule record bytes
BYTES_PER_GRANULE = GRANULE + GRANULE_REC

KIND_FREE = 0
KIND_OBJECT = 1
KIND_SLAB_PAGE = 2

SLAB_CLASSES = (16, 32, 64, 128, 256)
SLAB_LIMIT = 256          # requests below this go to a slab
SLAB_PAGE = 4096
SLAB_PAGE_ORDER = 4       # 256 << 4 == 4096

_REC = struct.Struct("<QQ")           # word0 = kind | idx << 8, word1 = type_id
_TAIL = struct.Struct("<QHHI32s")     # type_id, class_idx, n_slots, pad, bitmap
TAIL_SIZE = _TAIL.size                # 48


def type_id(name: str) -> int:
    """Stable 64-bit FNV-1a of a type's unique name."""
    h = 0xCBF29CE484222325
    for b in name.encode():
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass(frozen=True)
class ObjectDescriptor:
    addr: int
    size: int
    type_id: int


def slab_class_index(size: int) -> int:
    for i, c in enumerate(SLAB_CLASSES):
        if size <= c:
            return i
    raise BadSize(f"{size} is not a slab size")


def order_for(size: int) -> int:
    o = 0
    while GRANULE << o < size:
        o += 1
    return o


def heap_size_for_block(size: int) -> int:
    """Smallest page-multiple heap whose buddy arena fits one such block."""
    block = GRANULE << order_for(size)
    need = block + (block // GRANULE) * GRANULE_REC
    return -(-need // 4096) * 4096 + 4096


class _FreeSet:
    """Min-retrieval set of block offsets (lazy-deletion heap + set)."""

    __slots__ = ("members", "heap")

    def __init__(self):
        self.members = set()
        self.heap = []

    def add(self, off):
        self.members.add(off)
        heappush(self.heap, off)

    def discard(self, off):
        self.members.discard(off)

    def __contains__(self, off):
        return off in self.members

    def __len__(self):
        return len(self.members)

    def pop_min(self):
        while self.heap:
            off = heappop(self.heap)
            if off in self.members:
                self.members.remove(off)
                return off
        return None

    def peek_min(self):
        while self.heap and self.heap[0] not in self.members:
            heappop(self.heap)
        return self.heap[0] if self.heap else None


class PuddleHeap:
    """Allocator instance over one mapped puddle.

    ``tx`` hooks used by mutating operations:
      tx.tx_add(addr, n)        undo-log n bytes before they change
      tx.add_flush(addr, n)     range to flush at commit stage 1
      tx.store(addr, data) / tx.load(addr, n)   routed memory access
    """

    def __init__(self, hdr: PuddleHeader, base_addr: int, load, store):
        self.hdr = hdr
        self.base = base_addr
        self.heap_base = base_addr + hdr.header_size
        self._load = load
        self._store = store
        h = hdr.heap_size
        self.ng = h // BYTES_PER_GRANULE
        self.arena_len = self.ng * GRANULE
        self.table_addr = self.heap_base + h - self.ng * GRANULE_REC
        self.slack = h - self.ng * BYTES_PER_GRANULE
        self.free = {}            # order -> _FreeSet
        self.partial = {}         # (type_id, class_idx) -> set of page offsets
        self._slots_per_page = [(SLAB_PAGE - TAIL_SIZE) // c for c in SLAB_CLASSES]
        self._derive()

    # -- metadata access ---------------------------------------------------

    def _rec_addr(self, g: int) -> int:
        return self.table_addr + g * GRANULE_REC

    def _read_rec(self, g: int):
        w0, tid = _REC.unpack(self._load(self._rec_addr(g), GRANULE_REC))
        return w0 & 0xFF, (w0 >> 8) & 0xFF, tid

    def _write_rec(self, tx, g: int, kind: int, idx: int, tid: int):
        tx.tx_add(self._rec_addr(g), GRANULE_REC)
        self._store(self._rec_addr(g), _REC.pack(kind | idx << 8, tid))

    def _tail_addr(self, page_off: int) -> int:
        return self.heap_base + page_off + SLAB_PAGE - TAIL_SIZE

    def _read_tail(self, page_off: int):
        tid, idx, n, _, bitmap = _TAIL.unpack(
            self._load(self._tail_addr(page_off), TAIL_SIZE))
        return tid, idx, n, bytearray(bitmap)

    # -- derivation of volatile state ---------------------------------------

    def _decompose_arena(self):
        """Maximal naturally-aligned power-of-two blocks covering the arena."""
        out = []
        cur = 0
        while cur < self.arena_len:
            align = cur & -cur if cur else 1 << 62
            size = GRANULE
            while size * 2 <= align and cur + size * 2 <= self.arena_len:
                size *= 2
            out.append((cur, order_for(size)))
            cur += size
        return out

    def _derive(self):
        """Rebuild free lists and partial-page sets from on-media metadata."""
        raw = self._load(self.table_addr, self.ng * GRANULE_REC)
        words = np.frombuffer(raw, dtype="<u8").reshape(self.ng, 2)
        kinds = words[:, 0] & 0xFF
        live = []
        for g in np.nonzero(kinds)[0]:
            kind = int(kinds[g])
            idx = int(words[g, 0] >> 8 & 0xFF)
            tid = int(words[g, 1])
            if kind == KIND_SLAB_PAGE:
                live.append((int(g) * GRANULE, SLAB_PAGE_ORDER))
            elif kind == KIND_OBJECT:
                live.append((int(g) * GRANULE, idx))
            else:
                raise CorruptMetadata(f"granule {g}: unknown kind {kind}")
        live.sort()

        self.free = {}

        def carve(off, order, blocks):
            """Free decomposition of block (off, order) given live sub-blocks."""
            if not blocks:
                self.free.setdefault(order, _FreeSet()).add(off)
                return
            size = GRANULE << order
            if len(blocks) == 1 and blocks[0] == (off, order):
                return  # exactly this block is allocated
            half = size // 2
            lo = [b for b in blocks if b[0] < off + half]
            hi = [b for b in blocks if b[0] >= off + half]
            carve(off, order - 1, lo)
            carve(off + half, order - 1, hi)

        i = 0
        for off, order in self._decompose_arena():
            end = off + (GRANULE << order)
            mine = []
            while i < len(live) and live[i][0] < end:
                mine.append(live[i])
                i += 1
            carve(off, order, mine)

        self.partial = {}
        for g in np.nonzero(kinds == KIND_SLAB_PAGE)[0]:
            page_off = int(g) * GRANULE
            tid, idx, n, bitmap = self._read_tail(page_off)
            used = sum(bin(b).count("1") for b in bitmap)
            if used < n:
                self.partial.setdefault((tid, idx), set()).add(page_off)

        self.counters = self.stats()
        del self.counters["heap"]

    # -- buddy -------------------------------------------------------------

    def _buddy_take(self, order: int) -> Optional[int]:
        # address-ordered first fit: lowest free block that can serve the
        # order, split down keeping the low half (root lands at offset 0)
        best = None
        for o in range(order, 24):
            fs = self.free.get(o)
            if fs and len(fs):
                m = fs.peek_min()
                if m is not None and (best is None or m < best[0]):
                    best = (m, o)
        if best is None:
            return None
        off, o = best
        self.free[o].discard(off)
        while o > order:
            o -= 1
            self.free.setdefault(o, _FreeSet()).add(off + (GRANULE << o))
        return off

    def _buddy_release(self, off: int, order: int):
        # merging never crosses the arena's maximal-block forest: two free
        # buddy halves of a parent can only coexist inside one tree
        while True:
            size = GRANULE << order
            buddy = off ^ size
            fs = self.free.get(order)
            if fs and buddy in fs:
                fs.discard(buddy)
                off = min(off, buddy)
                order += 1
            else:
                break
        self.free.setdefault(order, _FreeSet()).add(off)

    # -- allocation --------------------------------------------------------

    def alloc(self, size: int, tid: int, tx) -> Optional[int]:
        """Zeroed region for ``size`` bytes, or None when this heap is full."""
        if size <= 0:
            raise BadSize("allocation size must be positive")
        if size < SLAB_LIMIT:
            return self._slab_alloc(size, tid, tx)
        order = order_for(size)
        off = self._buddy_take(order)
        if off is None:
            return None
        g = off // GRANULE
        self._write_rec(tx, g, KIND_OBJECT, order, tid)
        addr = self.heap_base + off
        block = GRANULE << order
        self.counters["free"] -= block
        self.counters["allocated"] += block
        tx.store(addr, b"\x00" * block)
        tx.add_flush(addr, block)
        return addr

    def _slab_alloc(self, size: int, tid: int, tx) -> Optional[int]:
        idx = slab_class_index(size)
        cls = SLAB_CLASSES[idx]
        key = (tid, idx)
        pages = self.partial.get(key)
        page_off = min(pages) if pages else None
        if page_off is None:
            page_off = self._buddy_take(SLAB_PAGE_ORDER)
            if page_off is None:
                return None
            g = page_off // GRANULE
            self._write_rec(tx, g, KIND_SLAB_PAGE, idx, tid)
            n = self._slots_per_page[idx]
            # one-time tail init; bitmap mutations are undo-logged per alloc
            tx.tx_add(self._tail_addr(page_off), TAIL_SIZE)
            self._store(self._tail_addr(page_off),
                        _TAIL.pack(tid, idx, n, 0, b"\x00" * 32))
            tx.add_flush(self._tail_addr(page_off), TAIL_SIZE)
            self.partial.setdefault(key, set()).add(page_off)
            # buddy block becomes n free slots plus page metadata
            self.counters["free"] += n * cls - SLAB_PAGE
            self.counters["metadata"] += SLAB_PAGE - n * cls

        tid_on_media, idx2, n, bitmap = self._read_tail(page_off)
        slot = None
        for i in range(n):
            if not bitmap[i >> 3] >> (i & 7) & 1:
                slot = i
                break
        if slot is None:
            raise CorruptMetadata(f"page 0x{page_off:x} in partial set but full")
        byte_addr = self._tail_addr(page_off) + 16 + (slot >> 3)
        tx.tx_add(byte_addr, 1)
        self._store(byte_addr, bytes([bitmap[slot >> 3] | 1 << (slot & 7)]))
        tx.add_flush(byte_addr, 1)
        if sum(bin(b).count("1") for b in bitmap) + 1 == n:
            self.partial[key].discard(page_off)
        self.counters["free"] -= cls
        self.counters["allocated"] += cls
        addr = self.heap_base + page_off + slot * cls
        tx.store(addr, b"\x00" * cls)
        tx.add_flush(addr, cls)
        return addr

    # -- free ----------------------------------------------------------------

    def free_obj(self, addr: int, tx):
        off = addr - self.heap_base
        if off < 0 or off >= self.arena_len:
            raise InvalidAddress(f"0x{addr:x} outside heap arena")
        g = off // GRANULE
        if off % GRANULE == 0:
            kind, idx, tid = self._read_rec(g)
            if kind == KIND_OBJECT:
                self._write_rec(tx, g, KIND_FREE, 0, 0)
                self._buddy_release(off, idx)
                block = GRANULE << idx
                self.counters["allocated"] -= block
                self.counters["free"] += block
                return
            if kind == KIND_FREE and self._page_rec_of(off) is None:
                raise DoubleFree(f"0x{addr:x} is not allocated")
        page = self._page_rec_of(off)
        if page is None:
            raise InvalidAddress(f"0x{addr:x} is not an allocation start")
        page_off, idx, tid = page
        cls = SLAB_CLASSES[idx]
        rel = off - page_off
        if rel % cls:
            raise InvalidAddress(f"0x{addr:x} is not a slot boundary")
        slot = rel // cls
        _, _, n, bitmap = self._read_tail(page_off)
        if slot >= n:
            raise InvalidAddress(f"slot {slot} beyond page capacity {n}")
        if not bitmap[slot >> 3] >> (slot & 7) & 1:
            raise DoubleFree(f"slot 0x{addr:x} already free")
        byte_addr = self._tail_addr(page_off) + 16 + (slot >> 3)
        tx.tx_add(byte_addr, 1)
        self._store(byte_addr, bytes([bitmap[slot >> 3] & ~(1 << (slot & 7)) & 0xFF]))
        tx.add_flush(byte_addr, 1)
        used = sum(bin(b).count("1") for b in bitmap) - 1
        key = (tid, idx)
        self.counters["allocated"] -= cls
        self.counters["free"] += cls
        if used == 0:
            # page empty: return it to the buddy
            self.partial.setdefault(key, set()).discard(page_off)
            self._write_rec(tx, page_off // GRANULE, KIND_FREE, 0, 0)
            self._buddy_release(page_off, SLAB_PAGE_ORDER)
            n_slots = self._slots_per_page[idx]
            self.counters["free"] += SLAB_PAGE - n_slots * cls
            self.counters["metadata"] -= SLAB_PAGE - n_slots * cls
        else:
            self.partial.setdefault(key, set()).add(page_off)

    def _page_rec_of(self, off: int):
        page_off = off & ~(SLAB_PAGE - 1)
        if page_off < 0 or page_off >= self.arena_len:
            return None
        kind, idx, tid = self._read_rec(page_off // GRANULE)
        if kind != KIND_SLAB_PAGE:
            return None
        return page_off, idx, tid

    # -- walking --------------------------------------------------------------

    def iterate_objects(self) -> Iterator[ObjectDescriptor]:
        """Every live object exactly once, ascending address."""
        raw = self._load(self.table_addr, self.ng * GRANULE_REC)
        words = np.frombuffer(raw, dtype="<u8").reshape(self.ng, 2)
        kinds = words[:, 0] & 0xFF
        for g in np.nonzero(kinds)[0]:
            kind = int(kinds[g])
            idx = int(words[g, 0] >> 8 & 0xFF)
            tid = int(words[g, 1])
            off = int(g) * GRANULE
            if kind == KIND_OBJECT:
                yield ObjectDescriptor(self.heap_base + off, GRANULE << idx, tid)
            elif kind == KIND_SLAB_PAGE:
                tid2, idx2, n, bitmap = self._read_tail(off)
                cls = SLAB_CLASSES[idx2]
                for s in range(n):
                    if bitmap[s >> 3] >> (s & 7) & 1:
                        yield ObjectDescriptor(self.heap_base + off + s * cls,
                                               cls, tid2)
            else:
                raise CorruptMetadata(f"granule {g}: unknown kind {kind}")

    # -- accounting -----------------------------------------------------------

    def stats(self) -> dict:
        """Byte accounting recomputed from media (free+allocated+metadata)."""
        free_b = sum((GRANULE << o) * len(fs) for o, fs in self.free.items())
        alloc_b = 0
        meta_b = self.ng * GRANULE_REC + self.slack
        raw = self._load(self.table_addr, self.ng * GRANULE_REC)
        words = np.frombuffer(raw, dtype="<u8").reshape(self.ng, 2)
        kinds = words[:, 0] & 0xFF
        for g in np.nonzero(kinds)[0]:
            kind = int(kinds[g])
            idx = int(words[g, 0] >> 8 & 0xFF)
            off = int(g) * GRANULE
            if kind == KIND_OBJECT:
                alloc_b += GRANULE << idx
            else:
                _, idx2, n, bitmap = self._read_tail(off)
                cls = SLAB_CLASSES[idx2]
                used = sum(bin(b).count("1") for b in bitmap)
                alloc_b += used * cls
                free_b += (n - used) * cls
                meta_b += SLAB_PAGE - n * cls
        return {"free": free_b, "allocated": alloc_b, "metadata": meta_b,
                "heap": self.hdr.heap_size}

    def check_conservation(self, full: bool = True):
        """Free + allocated + metadata must cover the heap exactly.

        The O(1) counter check runs after every op in harnesses; ``full``
        recomputes from media and cross-validates the counters.
        """
        c = self.counters
        if c["free"] + c["allocated"] + c["metadata"] != self.hdr.heap_size:
            raise CorruptMetadata(f"conservation violated (counters): {c}")
        if full:
            s = self.stats()
            if s["free"] + s["allocated"] + s["metadata"] != s["heap"]:
                raise CorruptMetadata(f"conservation violated: {s}")
            if {k: s[k] for k in c} != c:
                raise CorruptMetadata(f"counters {c} diverge from walk {s}")
            return s
        return dict(c)

    def free_lists(self) -> dict:
        return {o: sorted(fs.members) for o, fs in self.free.items() if len(fs)}

    def largest_free_order(self) -> int:
        return max((o for o, fs in self.free.items() if len(fs)), default=-1)
