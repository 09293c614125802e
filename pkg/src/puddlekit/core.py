"""Puddles, their on-media layout, and the machine-global persistent space.

A puddle is a fixed-size region with a header and a heap, stored one file
per puddle (``<uuid-hex>.pud``).  Header layout is bit-exact, little-endian,
fields in declared order::

    off  0  uuid            16 B
    off 16  total_size      u64   (header + heap, page multiple)
    off 24  assigned_base   u64   (0 while unassigned)
    off 32  alloc_metadata_region offset  u64
    off 40  alloc_metadata_region length  u64
    off 48  format_version  u8
    off 56.. alloc metadata region (see layout constants below)

The header gets 4 KiB per 2 MiB of heap, minimum one page.  The global
space is pure bookkeeping at desk scale: addresses are integers, and loads
and stores are routed to the owning puddle's backing domain.
"""

import struct
import uuid as uuidlib
from bisect import bisect_right
from dataclasses import dataclass
from typing import Callable, Optional

from . import pmem
from .errors import (
    AlreadyAssigned,
    BadSize,
    NotAssigned,
    NotMapped,
    OutOfBounds,
    SpaceExhausted,
    VersionMismatch,
    WildAddress,
)

PAGE = 4096
HEAP_PER_HEADER_PAGE = 2 * 1024 * 1024
FORMAT_VERSION = 1
ROOT_OFFSET = 0

_HEADER = struct.Struct("<16sQQQQB")
REGION_OFFSET = 56  # alloc metadata region starts here, 8-byte aligned

# fixed slots inside the alloc metadata region
REGION_ROOT = 0          # u64 pool-root address (root puddle only)
REGION_IMPORT_BASE = 8   # u64 pre-relocation base this puddle was known by
REGION_FLAGS = 16        # u8, bit 0 = pending pointer rewrite
REGION_ALLOC = 32        # allocator-owned area begins here

FLAG_PENDING_REWRITE = 1

DEFAULT_SPACE_BASE = 0x1000_0000_0000  # 16 TiB mark, leaves 0 as null
DEFAULT_SPACE_LEN = 64 * 1024 ** 3     # desk-scale stand-in for the 1 TiB range


@dataclass(frozen=True, order=True)
class PuddleId:
    raw: bytes

    def __post_init__(self):
        if len(self.raw) != 16:
            raise BadSize("puddle id must be 16 bytes")

    @classmethod
    def new(cls) -> "PuddleId":
        return cls(uuidlib.uuid4().bytes)

    @property
    def hex(self) -> str:
        return self.raw.hex()

    def filename(self) -> str:
        return f"{self.hex}.pud"

    def __repr__(self):
        return f"PuddleId({self.hex[:8]}…)"


NULL_ID = PuddleId(b"\x00" * 16)


def header_size_for_heap(heap_bytes: int) -> int:
    pages = max(1, -(-heap_bytes // HEAP_PER_HEADER_PAGE))
    return pages * PAGE


@dataclass
class PuddleHeader:
    uuid: PuddleId
    total_size: int
    assigned_base: int
    region_offset: int
    region_length: int
    format_version: int = FORMAT_VERSION

    @property
    def header_size(self) -> int:
        return self.region_offset + self.region_length

    @property
    def heap_size(self) -> int:
        return self.total_size - self.header_size

    def pack(self) -> bytes:
        return _HEADER.pack(self.uuid.raw, self.total_size, self.assigned_base,
                            self.region_offset, self.region_length,
                            self.format_version)

    @classmethod
    def unpack(cls, blob: bytes) -> "PuddleHeader":
        raw, total, base, roff, rlen, ver = _HEADER.unpack_from(blob)
        hdr = cls(PuddleId(raw), total, base, roff, rlen, ver)
        if ver != FORMAT_VERSION:
            raise VersionMismatch(f"puddle format {ver}, expected {FORMAT_VERSION}")
        return hdr


def create_puddle(machine: pmem.Machine, heap_size: int,
                  puddle_id: Optional[PuddleId] = None):
    """Create and initialize a puddle file; no address is assigned yet.

    ``heap_size`` must be a page multiple with at least one page; the header
    is sized at 4 KiB per 2 MiB of heap on top of that.
    """
    if heap_size < PAGE or heap_size % PAGE != 0:
        raise BadSize(f"heap size {heap_size} not a positive page multiple")
    pid = puddle_id or PuddleId.new()
    header_size = header_size_for_heap(heap_size)
    total = header_size + heap_size
    dom = machine.open_domain(pid.filename(), total)
    hdr = PuddleHeader(pid, total, 0, REGION_OFFSET, header_size - REGION_OFFSET)
    write_header(dom, hdr)
    return pid, hdr, dom


def write_header(dom: pmem.PersistentDomain, hdr: PuddleHeader):
    dom.store(0, hdr.pack())
    dom.persist(0, _HEADER.size)


def read_header(dom: pmem.PersistentDomain) -> PuddleHeader:
    return PuddleHeader.unpack(dom.load(0, _HEADER.size))


def set_assigned_base(dom: pmem.PersistentDomain, hdr: PuddleHeader, base: int):
    hdr.assigned_base = base
    dom.store(24, struct.pack("<Q", base))
    dom.persist(24, 8)


@dataclass
class _Extent:
    start: int   # page index
    npages: int
    mapped: bool = False


class GlobalSpace:
    """Page-granular reservation map plus load/store routing.

    Mutations are serialized by the owner (the daemon, or a single client
    runtime); readers may be concurrent.
    """

    def __init__(self, base: int = DEFAULT_SPACE_BASE,
                 length: int = DEFAULT_SPACE_LEN):
        if base % PAGE or length % PAGE:
            raise BadSize("space base/length must be page multiples")
        self.base = base
        self.length = length
        self.n_pages = length // PAGE
        self.extents: dict[PuddleId, _Extent] = {}
        self._order: list[tuple[int, PuddleId]] = []  # sorted (start_page, id)
        self._routes: list[tuple[int, int, object]] = []  # (addr, end, domain)
        self._route_starts: list[int] = []
        self.fault_handler: Optional[Callable[[int], None]] = None
        # page ranges first-fit must avoid (pre-relocation import ranges,
        # so fresh assignments never alias a not-yet-rewritten address)
        self.exclusions: dict[object, tuple[int, int]] = {}

    # -- reservations --------------------------------------------------

    def assign_address(self, puddle_id: PuddleId, size: int,
                       hint: Optional[int] = None) -> int:
        """Reserve a contiguous page range; honors ``hint`` iff free."""
        if puddle_id in self.extents:
            raise AlreadyAssigned(f"{puddle_id} already holds an address")
        npages = -(-size // PAGE)
        start = None
        if hint is not None:
            p = self._page_of(hint)
            if p is not None and hint % PAGE == 0 and self._range_free(p, npages):
                start = p
        if start is None:
            start = self._first_fit(npages)
        if start is None:
            raise SpaceExhausted(f"no room for {npages} pages")
        ext = _Extent(start, npages)
        self.extents[puddle_id] = ext
        pos = bisect_right(self._order, (start, puddle_id))
        self._order.insert(pos, (start, puddle_id))
        return self.base + start * PAGE

    def release_address(self, puddle_id: PuddleId):
        ext = self.extents.pop(puddle_id, None)
        if ext is None:
            raise NotAssigned(f"{puddle_id} holds no address")
        self._order.remove((ext.start, puddle_id))

    def _page_of(self, addr: int) -> Optional[int]:
        if addr < self.base or addr >= self.base + self.length:
            return None
        return (addr - self.base) // PAGE

    def _range_free(self, start: int, npages: int) -> bool:
        if start + npages > self.n_pages:
            return False
        i = bisect_right(self._order, (start + npages - 1, _MAX_ID)) - 1
        if i >= 0:
            s, pid = self._order[i]
            if s + self.extents[pid].npages > start:
                return False
        return True

    def add_exclusion(self, key, addr: int, size: int):
        start = (addr - self.base) // PAGE
        self.exclusions[key] = (start, -(-size // PAGE))

    def remove_exclusion(self, key):
        self.exclusions.pop(key, None)

    def _first_fit(self, npages: int) -> Optional[int]:
        taken = [(s, self.extents[pid].npages) for s, pid in self._order]
        taken.extend(self.exclusions.values())
        taken.sort()
        prev_end = 0
        for s, n in taken:
            if s - prev_end >= npages:
                return prev_end
            prev_end = max(prev_end, s + n)
        if self.n_pages - prev_end >= npages:
            return prev_end
        return None

    def reservation_at(self, addr: int):
        """(puddle_id, base_addr, size) of the reservation covering addr."""
        p = self._page_of(addr)
        if p is None:
            return None
        i = bisect_right(self._order, (p, _MAX_ID)) - 1
        if i < 0:
            return None
        s, pid = self._order[i]
        ext = self.extents[pid]
        if p < s + ext.npages:
            return pid, self.base + s * PAGE, ext.npages * PAGE
        return None

    def base_of(self, puddle_id: PuddleId) -> int:
        ext = self.extents.get(puddle_id)
        if ext is None:
            raise NotAssigned(f"{puddle_id} holds no address")
        return self.base + ext.start * PAGE

    def is_mapped(self, puddle_id: PuddleId) -> bool:
        ext = self.extents.get(puddle_id)
        return bool(ext and ext.mapped)

    # -- mapping and routing --------------------------------------------

    def map_puddle(self, puddle_id: PuddleId, dom: pmem.PersistentDomain) -> tuple:
        """Expose a puddle's bytes at its assigned address."""
        ext = self.extents.get(puddle_id)
        if ext is None:
            raise NotAssigned(f"{puddle_id} holds no address")
        base = self.base + ext.start * PAGE
        end = base + ext.npages * PAGE
        if not ext.mapped:
            pos = bisect_right(self._route_starts, base)
            self._route_starts.insert(pos, base)
            self._routes.insert(pos, (base, end, dom))
            ext.mapped = True
        return base, end

    def unmap_puddle(self, puddle_id: PuddleId):
        ext = self.extents.get(puddle_id)
        if ext is None or not ext.mapped:
            raise NotMapped(f"{puddle_id} is not mapped")
        base = self.base + ext.start * PAGE
        i = self._route_starts.index(base)
        del self._route_starts[i]
        del self._routes[i]
        ext.mapped = False

    def route(self, addr: int):
        """(domain, offset) for a mapped address, faulting in if possible."""
        r = self._route_of(addr)
        if r is None and self.fault_handler is not None:
            res = self.reservation_at(addr)
            if res is not None:
                self.fault_handler(addr)
                r = self._route_of(addr)
        if r is None:
            if self.reservation_at(addr) is None:
                raise WildAddress(f"0x{addr:x} reserved by nobody")
            raise NotMapped(f"0x{addr:x} reserved but unmapped")
        base, end, dom = r
        return dom, addr - base, end - addr

    def _route_of(self, addr: int):
        i = bisect_right(self._route_starts, addr) - 1
        if i < 0:
            return None
        base, end, dom = self._routes[i]
        if addr < end:
            return base, end, dom
        return None

    def load(self, addr: int, n: int) -> bytes:
        dom, off, room = self.route(addr)
        if n > room:
            raise OutOfBounds(f"load of {n} at 0x{addr:x} crosses puddle end")
        return dom.load(off, n)

    def store(self, addr: int, payload: bytes):
        dom, off, room = self.route(addr)
        if len(payload) > room:
            raise OutOfBounds(f"store of {len(payload)} at 0x{addr:x} crosses puddle end")
        dom.store(off, payload)

    def persist(self, addr: int, n: int):
        dom, off, _ = self.route(addr)
        dom.flush(off, n)
        dom.fence()

    def flush(self, addr: int, n: int):
        dom, off, _ = self.route(addr)
        dom.flush(off, n)


_MAX_ID = PuddleId(b"\xff" * 16)


def root_address(space: GlobalSpace, puddle_id: PuddleId, hdr: PuddleHeader) -> int:
    """Address of the pool root slot's target: first heap byte of the puddle."""
    if not space.is_mapped(puddle_id):
        raise NotMapped(f"{puddle_id} is not mapped")
    return space.base_of(puddle_id) + hdr.header_size + ROOT_OFFSET
