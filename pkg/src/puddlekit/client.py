"""Application-side runtime: pools, mapping, demand resolution, transactions.

A ClientRuntime talks to the daemon through a transport (UNIX socket or
in-process) and mirrors the global persistent space locally: capabilities
and pool manifests teach it which address ranges belong to which puddles,
and loads/stores are routed to the backing domains.  Access to a
reserved-but-unmapped (frontier) puddle either resolves transparently
("auto" mediation) or raises FrontierFault for the caller to resolve and
retry ("explicit" mediation); both backends share one contract.
"""

import os
import struct
import threading
import time
from dataclasses import dataclass
from typing import Optional

from . import wire
from .alloc import PuddleHeap, heap_size_for_block, type_id
from .core import (
    FLAG_PENDING_REWRITE,
    REGION_FLAGS,
    REGION_IMPORT_BASE,
    REGION_OFFSET,
    REGION_ROOT,
    GlobalSpace,
    PuddleId,
    read_header,
)
from .errors import (
    FrontierFault,
    NoCapability,
    NotInRootPuddle,
    NotInTransaction,
    NotMapped,
    OutOfBounds,
    PermissionDenied,
    UnwritableRange,
    WildAddress,
)
from .logs import LOG_HDR_SIZE, LS_ACTIVE, LS_DROPPED, Log, LogSpace, LogView
from .pmem import EventClock, PersistentDomain
from .reloc import ReferenceMap, RewriteEngine
from .txn import ACTIVE, IDLE, TransactionContext, TxHooks

VOLATILE_BASE = 0x4000_0000_0000
VOLATILE_SIZE = 64 * 1024 * 1024

DEFAULT_PUDDLE_HEAP = 2 * 1024 * 1024
DEFAULT_LOG_HEAP = 256 * 1024
LOGSPACE_HEAP = 4096


@dataclass
class Mapped:
    hexid: str
    dom: PersistentDomain
    base: int
    total: int
    header_size: int
    heap_size: int
    read_only: bool
    heap: Optional[PuddleHeap] = None


class VolatileArena:
    """Process-local memory with addresses disjoint from the global space,
    so volatile locations can appear in logs (applied on abort, skipped by
    recovery)."""

    def __init__(self, base=VOLATILE_BASE, size=VOLATILE_SIZE):
        self.base = base
        self.buf = bytearray(size)
        self.top = 0

    def alloc(self, n: int) -> int:
        addr = self.base + self.top
        self.top += (n + 7) & ~7
        if self.top > len(self.buf):
            raise OutOfBounds("volatile arena exhausted")
        return addr

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.base + len(self.buf)

    def load(self, addr, n):
        off = addr - self.base
        return bytes(self.buf[off:off + n])

    def store(self, addr, data):
        off = addr - self.base
        self.buf[off:off + len(data)] = data


class ClientRuntime:
    """One process's view of the puddle system."""

    def __init__(self, transport, *, machine=None, mediation: str = "auto",
                 default_puddle_heap: int = DEFAULT_PUDDLE_HEAP,
                 log_heap: int = DEFAULT_LOG_HEAP, paranoid: bool = False):
        self.transport = transport
        self.machine = machine          # embedded mode: share daemon domains
        self.clock = EventClock() if machine is None else machine.clock
        self.mediation = mediation
        self.default_puddle_heap = default_puddle_heap
        self.log_heap = log_heap
        self.paranoid = paranoid
        self.daemon_calls = 0

        hello, _ = self._request(wire.HELLO, {})
        self.uid = hello["uid"]
        self.gid = hello["gid"]
        self.space = GlobalSpace(hello["space_base"], hello["space_len"])
        if mediation == "auto":
            self.space.fault_handler = self._fault
        self.arena = VolatileArena()

        self.mapped: dict[str, Mapped] = {}
        self.caps: dict[str, dict] = {}
        self.member_info: dict[str, dict] = {}   # uuid -> latest wire record
        self.member_pool: dict[str, "PoolHandle"] = {}
        self.typemaps: dict[int, ReferenceMap] = {}
        self._chain_views: dict[str, LogView] = {}
        self._tls = threading.local()
        self._init_lock = threading.Lock()
        self._logspace: Optional[LogSpace] = None
        self._logspace_hex: Optional[str] = None

        # counters for laziness/scaling assertions
        self.mapped_count = 0
        self.rewritten_puddles = 0
        self.rewritten_slots = 0
        self.scanned_slots = 0
        self.rewrite_seconds = 0.0

    # -- transport ------------------------------------------------------------

    def _request(self, code, payload):
        self.daemon_calls += 1
        return self.transport.request(code, payload)

    def ping(self, echo=None):
        payload, _ = self._request(wire.PING, {"echo": echo})
        return payload

    def status(self):
        payload, _ = self._request(wire.STATUS, {})
        return payload

    # -- identity hello override (trusted daemons only) -------------------------

    def declare_identity(self, uid, gid):
        payload, _ = self._request(wire.HELLO, {"uid": uid, "gid": gid})
        self.uid, self.gid = payload["uid"], payload["gid"]
        return payload

    # -- domains ---------------------------------------------------------------

    def _open_from_cap(self, cap, fds):
        name = f"{cap['uuid']}.pud"
        if self.machine is not None:
            return self.machine.open_domain(name, cap["total"],
                                            readonly=False)
        if cap["backend"] == "fd" and fds:
            return PersistentDomain(cap["path"], cap["total"], clock=self.clock,
                                    readonly=cap["read_only"],
                                    fds=(fds[0], fds[1]))
        return PersistentDomain(cap["path"], cap["total"], clock=self.clock,
                                readonly=cap["read_only"])

    # -- memory plane ------------------------------------------------------------

    def is_volatile(self, addr: int) -> bool:
        return self.arena.contains(addr)

    def valloc(self, n: int) -> int:
        return self.arena.alloc(n)

    def load(self, addr: int, n: int) -> bytes:
        if self.arena.contains(addr):
            return self.arena.load(addr, n)
        return bytes(self._space_op("load", addr, n))

    def store(self, addr: int, data: bytes, _tx_note: bool = True):
        if self.arena.contains(addr):
            self.arena.store(addr, data)
            return
        self._space_op("store", addr, data)
        if _tx_note:
            ctx = self.current_tx()
            if ctx is not None:
                ctx.note_store(addr, len(data))

    def flush(self, addr: int, n: int):
        dom, off, _ = self._space_op("route", addr)
        dom.flush(off, n)
        return dom

    def persist(self, addr: int, n: int):
        self.flush(addr, n).fence()

    def _space_op(self, kind, addr, arg=None):
        while True:
            try:
                if kind == "load":
                    return self.space.load(addr, arg)
                if kind == "store":
                    return self.space.store(addr, arg)
                return self.space.route(addr)
            except NotMapped:
                if self.mediation == "auto":
                    raise  # fault handler already ran and failed
                raise FrontierFault(addr) from None

    def is_writable(self, addr: int, n: int) -> bool:
        try:
            dom, off, room = self._space_op("route", addr)
        except (WildAddress, NotMapped, FrontierFault):
            return False
        return not dom.readonly and n <= room

    def load_u64(self, addr: int) -> int:
        return struct.unpack("<Q", self.load(addr, 8))[0]

    def store_u64(self, addr: int, value: int):
        self.store(addr, struct.pack("<Q", value))

    # -- demand resolution ---------------------------------------------------------

    def _fault(self, addr: int):
        self.resolve(addr)

    def resolve(self, addr: int):
        """Map the frontier puddle covering ``addr``; wild addresses fault."""
        res = self.space.reservation_at(addr)
        if res is None:
            raise WildAddress(f"0x{addr:x} reserved by nobody")
        pid, base, _ = res
        return self.map_puddle(pid.hex)

    # -- capabilities and mapping -----------------------------------------------------

    def capability(self, hexid: str, want_write=True):
        cached = self.caps.get(hexid)
        if cached is not None and (not cached[0]["read_only"] or not want_write):
            return cached
        try:
            cap, fds = self._request(wire.GET_EXIST_PUDDLE,
                                     {"uuid": hexid, "want_write": want_write})
        except PermissionDenied:
            if not want_write:
                raise
            cap, fds = self._request(wire.GET_EXIST_PUDDLE,
                                     {"uuid": hexid, "want_write": False})
        self.caps[hexid] = (cap, fds)
        return cap, fds

    def _mirror_reserve(self, hexid: str, base: int, total: int):
        pid = PuddleId(bytes.fromhex(hexid))
        if pid in self.space.extents:
            return
        got = self.space.assign_address(pid, total, hint=base)
        assert got == base, "daemon and mirror reservation diverged"

    def _adopt_cap(self, cap, fds) -> Mapped:
        hexid = cap["uuid"]
        self.caps[hexid] = (cap, fds)
        self.member_info[hexid] = dict(cap)
        self._mirror_reserve(hexid, cap["base"], cap["total"])
        dom = self._open_from_cap(cap, fds)
        self.space.map_puddle(PuddleId(bytes.fromhex(hexid)), dom)
        m = Mapped(hexid, dom, cap["base"], cap["total"],
                   cap["total"] - cap["heap"], cap["heap"], cap["read_only"])
        self.mapped[hexid] = m
        self.mapped_count += 1
        return m

    def heap_of(self, m: Mapped) -> PuddleHeap:
        if m.heap is None:
            hdr = read_header(m.dom)
            m.heap = PuddleHeap(hdr, m.base, load=self.load, store=self.store)
        return m.heap

    def map_puddle(self, hexid: str, want_write=True) -> Mapped:
        """Map a puddle at its assigned address, rewriting references that
        point into re-assigned ranges before exposing it."""
        m = self.mapped.get(hexid)
        if m is not None:
            return m
        cap, fds = self.capability(hexid, want_write=want_write)
        m = self._adopt_cap(cap, fds)
        flags = m.dom.load(REGION_OFFSET + REGION_FLAGS, 1)[0]
        if flags & FLAG_PENDING_REWRITE:
            if m.read_only:
                raise NoCapability(
                    f"{hexid} needs pointer rewriting but was mapped read-only")
            self._rewrite(m)
        return m

    def unmap(self, hexid: str):
        m = self.mapped.pop(hexid, None)
        if m is None:
            raise NotMapped(hexid)
        self.space.unmap_puddle(PuddleId(bytes.fromhex(hexid)))
        self.mapped_count -= 1

    # -- pointer rewriting -------------------------------------------------------

    def _context_for(self, hexid: str):
        pool = self.member_pool.get(hexid)
        if pool is None:
            return [], None
        return pool.context(), pool

    def _ensure_reserved(self, hexid: str) -> int:
        info = self.member_info.get(hexid)
        if info and info.get("base"):
            self._mirror_reserve(hexid, info["base"], info["total"])
            return info["base"]
        payload, _ = self._request(wire.GET_EXIST_PUDDLE,
                                   {"uuid": hexid, "want_write": True,
                                    "reserve_only": True})
        info = self.member_info.setdefault(hexid, {})
        info.update(payload)
        pool = self.member_pool.get(hexid)
        if pool is not None:
            pool.members[hexid].update(payload)
            info["total"] = pool.members[hexid]["total"]
        self._mirror_reserve(hexid, payload["base"], info["total"])
        return payload["base"]

    def _rewrite(self, m: Mapped):
        t0 = time.perf_counter()
        context, pool = self._context_for(m.hexid)
        engine = RewriteEngine(self.typemaps, context, self._ensure_reserved,
                               self.load, self.store)
        touched = engine.rewrite_objects(self.heap_of(m).iterate_objects())
        if pool is not None and pool.root_hex == m.hexid:
            slot = m.base + REGION_OFFSET + REGION_ROOT
            if engine.rewrite_slot(slot):
                touched.append(slot)
        for addr in touched:
            self.flush(addr, 8)
        m.dom.fence()
        # only now expose the puddle: clear the pending flag durably
        m.dom.store(REGION_OFFSET + REGION_FLAGS, b"\x00")
        m.dom.flush(REGION_OFFSET + REGION_FLAGS, 1)
        m.dom.fence()
        self.rewritten_puddles += 1
        self.rewritten_slots += engine.rewritten
        self.scanned_slots += engine.scanned
        self.rewrite_seconds += time.perf_counter() - t0
        if pool is not None:
            pool.members[m.hexid]["pending"] = False

    # -- type registry ---------------------------------------------------------------

    def register_type(self, name: str, slots=()):
        """Register the reference map for a persistent type; returns its id.

        ``slots``: (offset, target type name or 0) pairs.  Pointer-free
        types register with no slots so exported pools stay self-contained.
        """
        tid = type_id(name)
        wire_slots = [[off, type_id(k) if isinstance(k, str) else int(k)]
                      for off, k in slots]
        rmap = ReferenceMap(tid, tuple((o, k) for o, k in wire_slots))
        self._request(wire.REG_REF_MAP, rmap.to_wire())
        self.typemaps[tid] = rmap
        return tid

    # -- pools -----------------------------------------------------------------------

    def _pool_from_wire(self, manifest) -> "PoolHandle":
        pool = PoolHandle(self, manifest)
        for h in pool.members:
            self.member_pool[h] = pool
            info = pool.members[h]
            self.member_info.setdefault(h, {}).update(info)
            if info.get("base"):
                # reserved members are routable targets even before mapping
                self._mirror_reserve(h, info["base"], info["total"])
        for obj in manifest.get("typemaps", []):
            rmap = ReferenceMap.from_wire(obj)
            self.typemaps[rmap.type_id] = rmap
        return pool

    def create_pool(self, name: str, root_heap: Optional[int] = None) -> "PoolHandle":
        manifest, _ = self._request(wire.CREATE_POOL, {
            "name": name, "root_heap": root_heap or self.default_puddle_heap})
        return self._pool_from_wire(manifest)

    def open_pool(self, name_or_id: str) -> "PoolHandle":
        manifest, _ = self._request(wire.OPEN_POOL, {"pool": name_or_id})
        return self._pool_from_wire(manifest)

    def import_bundle(self, path) -> "PoolHandle":
        manifest, _ = self._request(wire.IMPORT_BUNDLE, {"path": str(path)})
        return self._pool_from_wire(manifest)

    def export_pool(self, pool, out_path) -> dict:
        key = pool.pool_id if isinstance(pool, PoolHandle) else pool
        payload, _ = self._request(wire.EXPORT_POOL,
                                   {"pool": key, "out": str(out_path)})
        return payload

    def free_puddle(self, hexid: str):
        self._request(wire.FREE_PUDDLE, {"uuid": hexid})
        self.caps.pop(hexid, None)
        if hexid in self.mapped:
            self.unmap(hexid)

    # -- transactions -------------------------------------------------------------------

    def current_tx(self) -> Optional[TransactionContext]:
        ctx = getattr(self._tls, "ctx", None)
        if ctx is not None and ctx.state == IDLE:
            ctx = None
        return ctx

    def require_tx(self) -> TransactionContext:
        ctx = self.current_tx()
        if ctx is None:
            raise NotInTransaction("no active transaction on this thread")
        return ctx

    def _ensure_logspace(self):
        with self._init_lock:
            if self._logspace is not None:
                return
            cap, fds = self._request(wire.GET_NEW_PUDDLE,
                                     {"heap": LOGSPACE_HEAP})
            dom = self._open_from_cap(cap, fds)
            self._request(wire.REG_LOG_SPACE, {"uuid": cap["uuid"]})
            ls = LogSpace(dom, cap["total"] - cap["heap"], cap["heap"])
            ls.format()
            self._logspace = ls
            self._logspace_hex = cap["uuid"]

    def _new_log_view(self, heap_size):
        cap, fds = self._request(wire.GET_NEW_PUDDLE, {"heap": heap_size})
        dom = self._open_from_cap(cap, fds)
        view = LogView(dom, cap["total"] - cap["heap"], cap["heap"])
        view.format()
        return cap["uuid"], view

    def thread_log(self) -> Log:
        """The thread's cached log, acquired from the daemon exactly once."""
        log = getattr(self._tls, "log", None)
        if log is not None:
            return log
        self._ensure_logspace()
        hexid, view = self._new_log_view(self.log_heap)
        self._logspace.add(PuddleId(bytes.fromhex(hexid)), LS_ACTIVE)
        self._chain_views[hexid] = view
        log = Log(view, resolver=lambda pid: self._chain_views[pid.hex])
        self._tls.log = log
        self._tls.log_hex = hexid
        return log

    def _chain_log(self, log: Log, payload_len: int):
        heap = max(self.log_heap, heap_size_for_block(payload_len + 4096))
        hexid, view = self._new_log_view(heap)
        self._logspace.add(PuddleId(bytes.fromhex(hexid)), LS_ACTIVE)
        # reached through the chain, not as its own log space entry
        self._logspace.set_status(PuddleId(bytes.fromhex(hexid)), LS_DROPPED)
        self._chain_views[hexid] = view
        log.chain_log_puddle(view, PuddleId(bytes.fromhex(hexid)))

    def tx_begin(self) -> TransactionContext:
        ctx = self.current_tx()
        if ctx is not None:
            ctx.depth += 1
            return ctx
        ctx = TransactionContext(self, self.thread_log())
        self._tls.ctx = ctx
        return ctx

    def tx_add(self, addr: int, length: int):
        self.require_tx().add(addr, length)

    def tx_redo_set(self, addr: int, payload: bytes):
        self.require_tx().redo_set(addr, payload)

    def tx_commit(self):
        self.require_tx().commit()

    def tx_end(self):
        self.tx_commit()

    def tx_abort(self):
        self.require_tx().abort()

    def _tx_finished(self, ctx):
        if ctx.state != ACTIVE:
            self._tls.ctx = None

    def transaction(self):
        return _TxScope(self)

    def close(self):
        self.transport.close()
        if self.machine is None:
            for m in self.mapped.values():
                m.dom.close()


class _TxScope:
    def __init__(self, runtime):
        self.rt = runtime

    def __enter__(self):
        return self.rt.tx_begin()

    def __exit__(self, etype, e, tb):
        ctx = self.rt.current_tx()
        if etype is None:
            if ctx is not None:
                ctx.commit()
            return False
        if ctx is not None and ctx.state == ACTIVE:
            ctx.abort()
        return False


class PoolHandle:
    """Allocation facade over one pool's member puddles."""

    def __init__(self, runtime: ClientRuntime, manifest: dict):
        self.rt = runtime
        self.pool_id = manifest["pool_id"]
        self.name = manifest["name"]
        self.root_hex = manifest["root"]
        self.members = {m["uuid"]: dict(m) for m in manifest["members"]}
        self.member_order = [m["uuid"] for m in manifest["members"]]
        self._alloc_lock = threading.Lock()

    # -- relocation context: pre-import ranges of every member -------------

    def context(self):
        out = []
        for h in self.member_order:
            info = self.members[h]
            ib = info.get("import_base") or 0
            if ib:
                out.append((ib, ib + info["total"], h))
        return out

    # -- mapping ------------------------------------------------------------

    def map_root(self) -> Mapped:
        return self.rt.map_puddle(self.root_hex)

    def map_member(self, hexid: str) -> Mapped:
        return self.rt.map_puddle(hexid)

    def root_address(self) -> int:
        m = self.map_root()
        return m.base + m.header_size

    def _root_slot(self) -> int:
        m = self.map_root()
        return m.base + REGION_OFFSET + REGION_ROOT

    def set_root(self, addr: int):
        m = self.map_root()
        if addr and not (m.base <= addr < m.base + m.total):
            raise NotInRootPuddle(f"0x{addr:x} outside the root puddle")
        ctx = self.rt.current_tx()
        slot = self._root_slot()
        if ctx is not None:
            ctx.add(slot, 8)
            self.rt.store_u64(slot, addr)
        else:
            self.rt.store_u64(slot, addr)
            self.rt.persist(slot, 8)

    def get_root(self) -> int:
        return self.rt.load_u64(self._root_slot())

    # -- allocation -----------------------------------------------------------

    def precache(self, k: int, heap: Optional[int] = None):
        """Acquire spare member puddles up front to avoid daemon calls later."""
        for _ in range(k):
            self._acquire_member(heap or self.rt.default_puddle_heap)

    def _acquire_member(self, heap_size) -> Mapped:
        cap, fds = self.rt._request(wire.GET_NEW_PUDDLE,
                                    {"heap": heap_size, "pool": self.pool_id})
        hexid = cap["uuid"]
        self.members[hexid] = {"uuid": hexid, "base": cap["base"],
                               "import_base": 0, "total": cap["total"],
                               "heap": cap["heap"], "header": cap["header"],
                               "pending": False}
        self.member_order.append(hexid)
        self.rt.member_pool[hexid] = self
        self.rt.member_info.setdefault(hexid, {}).update(self.members[hexid])
        return self.rt._adopt_cap(cap, fds)

    def malloc(self, size: int, tid) -> int:
        """Zeroed, type-tagged allocation from any member with room."""
        if isinstance(tid, str):
            tid = type_id(tid)
        ctx = self.rt.require_tx()
        hooks = TxHooks(self.rt, ctx)
        with self._alloc_lock:
            for hexid in self.member_order:
                m = self.rt.mapped.get(hexid)
                if m is None or m.read_only:
                    continue
                heap = self.rt.heap_of(m)
                addr = heap.alloc(size, tid, hooks)
                if addr is not None:
                    ctx.touched_heaps.add(heap)
                    return addr
            for hexid in self.member_order:
                if hexid in self.rt.mapped:
                    continue
                m = self.rt.map_puddle(hexid)
                heap = self.rt.heap_of(m)
                addr = heap.alloc(size, tid, hooks)
                if addr is not None:
                    ctx.touched_heaps.add(heap)
                    return addr
            need = max(self.rt.default_puddle_heap, heap_size_for_block(size))
            m = self._acquire_member(need)
            heap = self.rt.heap_of(m)
            addr = heap.alloc(size, tid, hooks)
            if addr is None:
                raise OutOfBounds(f"fresh puddle cannot hold {size} bytes")
            ctx.touched_heaps.add(heap)
            return addr

    def free(self, addr: int):
        ctx = self.rt.require_tx()
        hooks = TxHooks(self.rt, ctx)
        with self._alloc_lock:
            res = self.rt.space.reservation_at(addr)
            if res is None or res[0].hex not in self.members:
                from .errors import InvalidAddress
                raise InvalidAddress(f"0x{addr:x} is not in pool {self.name!r}")
            hexid = res[0].hex
            m = self.rt.map_puddle(hexid)
            heap = self.rt.heap_of(m)
            heap.free_obj(addr, hooks)
            ctx.touched_heaps.add(heap)

    def iterate_objects(self):
        for hexid in self.member_order:
            m = self.rt.map_puddle(hexid)
            yield from self.rt.heap_of(m).iterate_objects()
