"""The privileged service owning all puddle files.

Everything an application gets — puddles, pools, log-space registration,
reference-map storage — flows through here, and the daemon's own state is
updated durably before any success response.  At startup after a dirty
shutdown it performs application-independent recovery: every registered
log space is scanned and valid logs are replayed onto exactly the puddles
their owner could write, before the first client frame is answered.

The service core is transport-agnostic; ``serve`` wraps it in a UNIX-socket
request loop with SCM_RIGHTS capability transfer, and embedded harnesses
drive it through ``LocalTransport`` for deterministic crash sweeps.
"""

import fcntl
import json
import os
import socket
import struct
import threading
import time
import uuid as uuidlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import core, wire
from .alloc import PuddleHeap
from .checksum import crc32c
from .core import (
    FLAG_PENDING_REWRITE,
    REGION_FLAGS,
    REGION_IMPORT_BASE,
    REGION_OFFSET,
    GlobalSpace,
    PuddleId,
    PuddleHeader,
    read_header,
    set_assigned_base,
)
from .errors import (
    AlreadyRegistered,
    BadSize,
    CorruptBundle,
    CorruptLog,
    CorruptMetadata,
    IoFailure,
    LockHeld,
    MissingReferenceMap,
    NotOwner,
    OutOfStorage,
    PermissionDenied,
    PoolBusy,
    ProtocolError,
    PuddleError,
    UnknownUuid,
)
from .logs import LS_ACTIVE, LS_DROPPED, LS_INVALID, Log, LogSpace, LogView, entry_valid
from .pmem import Machine
from .reloc import (
    BundleManifest,
    BundlePuddle,
    ReferenceMap,
    TypeRegistry,
    read_bundle,
    write_bundle,
)

# daemon-side permission bits (unrelated to filesystem modes)
OWNER_R, OWNER_W = 1, 2
GROUP_R, GROUP_W = 4, 8
OTHER_R, OTHER_W = 16, 32
DEFAULT_BITS = OWNER_R | OWNER_W

STATE_FILE = "daemon.state"
STATE_CAPACITY = 4 * 1024 * 1024
LOCK_FILE = ".lock"

DEFAULT_LOG_HEAP = 256 * 1024
DEFAULT_LOGSPACE_HEAP = 4096


_session_counter = 0


def _next_session() -> int:
    global _session_counter
    _session_counter += 1
    return _session_counter


@dataclass
class Identity:
    uid: int
    gid: int
    pid: int = 0
    session: int = field(default_factory=_next_session)


@dataclass
class PuddleRec:
    total: int
    heap: int
    base: int = 0            # 0 while unassigned
    import_base: int = 0
    owner_uid: int = 0
    owner_gid: int = 0
    bits: int = DEFAULT_BITS
    pool: Optional[str] = None
    pending: bool = False

    @property
    def header_size(self) -> int:
        return self.total - self.heap


@dataclass
class PoolRec:
    name: str
    root: str                # uuid hex
    members: list = field(default_factory=list)


def perm_allows(rec: PuddleRec, uid: int, gid: int, write: bool) -> bool:
    if uid == rec.owner_uid:
        r, w = OWNER_R, OWNER_W
    elif gid == rec.owner_gid:
        r, w = GROUP_R, GROUP_W
    else:
        r, w = OTHER_R, OTHER_W
    return bool(rec.bits & (w if write else r))


class StateStore:
    """Crash-atomic snapshots: two slots, higher valid sequence wins."""

    HDR = struct.Struct("<QII")  # seq, length, crc

    def __init__(self, dom):
        self.dom = dom
        self.slot_size = (dom.capacity - 4096) // 2
        self.offsets = (4096, 4096 + self.slot_size)
        self.seq = 0
        self._next_slot = 0

    def save(self, obj: dict):
        blob = json.dumps(obj, separators=(",", ":")).encode()
        if len(blob) + self.HDR.size > self.slot_size:
            raise OutOfStorage("daemon state snapshot exceeds slot size")
        self.seq += 1
        off = self.offsets[self._next_slot]
        self._next_slot ^= 1
        self.dom.store(off + self.HDR.size, blob)
        self.dom.flush(off + self.HDR.size, len(blob))
        self.dom.fence()
        self.dom.store(off, self.HDR.pack(self.seq, len(blob), crc32c(blob)))
        self.dom.flush(off, self.HDR.size)
        self.dom.fence()

    def load(self) -> Optional[dict]:
        best = None
        for i, off in enumerate(self.offsets):
            seq, length, crc = self.HDR.unpack(self.dom.load(off, self.HDR.size))
            if seq == 0 or length == 0 or length + self.HDR.size > self.slot_size:
                continue
            blob = bytes(self.dom.load(off + self.HDR.size, length))
            if crc32c(blob) != crc:
                continue
            if best is None or seq > best[0]:
                best = (seq, blob, i)
        if best is None:
            return None
        self.seq = best[0]
        self._next_slot = 1 - best[2]  # never overwrite the winning slot
        return json.loads(best[1].decode())


class PuddleService:
    """Transport-agnostic daemon core. All requests are serialized."""

    def __init__(self, data_dir, *, machine: Optional[Machine] = None,
                 space_base: int = core.DEFAULT_SPACE_BASE,
                 space_len: int = core.DEFAULT_SPACE_LEN,
                 trust_ids: bool = False, cap_backend: str = "path",
                 recovery_delay: float = 0.0,
                 state_capacity: int = STATE_CAPACITY):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.machine = machine if machine is not None else Machine(self.data_dir)
        if Path(self.machine.root) != self.data_dir:
            raise IoFailure("machine root must be the daemon data dir")
        self.trust_ids = trust_ids
        self.cap_backend = cap_backend
        self.recovery_delay = recovery_delay
        self.lock = threading.RLock()

        self._lock_fd = os.open(self.data_dir / LOCK_FILE, os.O_RDWR | os.O_CREAT, 0o600)
        try:
            fcntl.flock(self._lock_fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            os.close(self._lock_fd)
            raise LockHeld(f"{self.data_dir} already served by another daemon")

        self.space = GlobalSpace(space_base, space_len)
        self.puddles: dict[str, PuddleRec] = {}
        self.pools: dict[str, PoolRec] = {}
        self.logspaces: list[str] = []
        self.types = TypeRegistry()
        self.frontier: set[str] = set()
        self.quarantine: list[dict] = []
        self.last_recovery: Optional[dict] = None
        self._clean_at_load = True
        self._had_snapshot = False
        self._sessions_logspace: dict[int, str] = {}

        spath = self.data_dir / STATE_FILE
        if spath.exists():
            state_capacity = spath.stat().st_size  # existing state wins
        self.state_dom = self.machine.open_domain(STATE_FILE, state_capacity)
        self.store = StateStore(self.state_dom)
        self._load_state()
        self._collect_orphans()
        self.recovered = False
        if not self._clean_at_load:
            self.last_recovery = self.recovery_all()
        self.recovered = True
        self._persist(clean=False)  # running

    # -- state (de)serialization -----------------------------------------

    def _snapshot(self, clean: bool) -> dict:
        return {
            "clean": clean,
            "puddles": {h: {"total": r.total, "heap": r.heap, "base": r.base,
                            "import_base": r.import_base,
                            "owner": [r.owner_uid, r.owner_gid],
                            "bits": r.bits, "pool": r.pool,
                            "pending": r.pending}
                        for h, r in self.puddles.items()},
            "pools": {h: {"name": p.name, "root": p.root, "members": p.members}
                      for h, p in self.pools.items()},
            "logspaces": self.logspaces,
            "typemaps": self.types.to_wire(),
            "frontier": sorted(self.frontier),
            "quarantine": self.quarantine,
            "last_recovery": self.last_recovery,
        }

    def _persist(self, clean: bool = False):
        self.store.save(self._snapshot(clean))

    def _load_state(self):
        obj = self.store.load()
        if obj is None:
            self._clean_at_load = True  # nothing to recover on first boot
            self._had_snapshot = False
            return
        self._had_snapshot = True
        self._clean_at_load = bool(obj.get("clean"))
        for h, d in obj["puddles"].items():
            rec = PuddleRec(d["total"], d["heap"], d["base"], d["import_base"],
                            d["owner"][0], d["owner"][1], d["bits"], d["pool"],
                            d["pending"])
            self.puddles[h] = rec
            if rec.base:
                got = self.space.assign_address(PuddleId(bytes.fromhex(h)),
                                                rec.total, hint=rec.base)
                if got != rec.base:
                    raise CorruptMetadata(f"registry address clash for {h}")
            if rec.import_base and rec.pool is not None:
                self.space.add_exclusion(("old", h), rec.import_base, rec.total)
        for h, d in obj["pools"].items():
            self.pools[h] = PoolRec(d["name"], d["root"], list(d["members"]))
        self.logspaces = list(obj.get("logspaces", []))
        self.types.merge_wire(obj.get("typemaps", []))
        self.frontier = set(obj.get("frontier", []))
        self.quarantine = list(obj.get("quarantine", []))
        self.last_recovery = obj.get("last_recovery")

    def _collect_orphans(self):
        """Remove puddle files created but never registered (crash window)."""
        known = {f"{h}.pud" for h in self.puddles}
        removed = []
        for f in self.data_dir.glob("*.pud"):
            if f.name not in known:
                removed.append(f.name)
                self.machine.forget(f.name)
                f.unlink(missing_ok=True)
                Path(str(f) + ".durable").unlink(missing_ok=True)
        self.orphans_removed = removed

    # -- helpers -----------------------------------------------------------

    def _dom(self, hexid: str):
        rec = self.puddles.get(hexid)
        if rec is None:
            raise UnknownUuid(hexid)
        return self.machine.open_domain(f"{hexid}.pud", rec.total)

    def _pid(self, hexid: str) -> PuddleId:
        return PuddleId(bytes.fromhex(hexid))

    def _require(self, hexid: str) -> PuddleRec:
        rec = self.puddles.get(hexid)
        if rec is None:
            raise UnknownUuid(hexid)
        return rec

    def _capability(self, hexid: str, rec: PuddleRec, read_only: bool) -> dict:
        return {"uuid": hexid, "total": rec.total, "heap": rec.heap,
                "header": rec.header_size, "base": rec.base,
                "import_base": rec.import_base, "pending": rec.pending,
                "read_only": read_only, "backend": self.cap_backend,
                "path": str(self.data_dir / f"{hexid}.pud"),
                "token": uuidlib.uuid4().hex}

    def _reserve(self, hexid: str, rec: PuddleRec):
        if rec.base:
            return
        pid = self._pid(hexid)
        hint = rec.import_base or None
        rec.base = self.space.assign_address(pid, rec.total, hint=hint)
        set_assigned_base(self._dom(hexid), read_header(self._dom(hexid)), rec.base)

    def _member_wire(self, hexid: str) -> dict:
        rec = self._require(hexid)
        return {"uuid": hexid, "base": rec.base, "import_base": rec.import_base,
                "total": rec.total, "heap": rec.heap,
                "header": rec.header_size, "pending": rec.pending}

    def _pool_wire(self, pool_hex: str) -> dict:
        pool = self.pools[pool_hex]
        self._refresh_pending(pool_hex)
        return {"pool_id": pool_hex, "name": pool.name, "root": pool.root,
                "members": [self._member_wire(m) for m in pool.members],
                "typemaps": self.types.to_wire(),
                "space_base": self.space.base, "space_len": self.space.length}

    def _refresh_pending(self, pool_hex: str):
        """Header pending flags are client-cleared; sync our cached view."""
        pool = self.pools[pool_hex]
        changed = False
        any_pending = False
        for m in pool.members:
            rec = self.puddles[m]
            if rec.pending and rec.base:
                flags = self._dom(m).load(REGION_OFFSET + REGION_FLAGS, 1)[0]
                if not flags & FLAG_PENDING_REWRITE:
                    rec.pending = False
                    changed = True
            any_pending = any_pending or rec.pending
        if not any_pending:
            for m in pool.members:
                rec = self.puddles[m]
                if rec.import_base:
                    rec.import_base = 0
                    self.space.remove_exclusion(("old", m))
                    changed = True
        if changed:
            self._persist()

    # -- operations ---------------------------------------------------------

    def op_ping(self, ident, payload):
        return {"echo": payload.get("echo")}

    def op_hello(self, ident, payload):
        if self.trust_ids and "uid" in payload:
            ident.uid = int(payload["uid"])
            ident.gid = int(payload.get("gid", ident.gid))
        return {"uid": ident.uid, "gid": ident.gid,
                "space_base": self.space.base, "space_len": self.space.length,
                "backend": self.cap_backend}

    def op_get_new_puddle(self, ident, payload):
        heap = int(payload["heap"])
        bits = int(payload.get("bits", DEFAULT_BITS))
        pool_hex = payload.get("pool")
        if pool_hex is not None:
            pool = self.pools.get(pool_hex)
            if pool is None:
                raise UnknownUuid(f"pool {pool_hex}")
            root_rec = self._require(pool.root)
            if not perm_allows(root_rec, ident.uid, ident.gid, write=True):
                raise PermissionDenied("no write access to pool")
        pid, hdr, dom = core.create_puddle(self.machine, heap)
        hexid = pid.hex
        rec = PuddleRec(hdr.total_size, heap, owner_uid=ident.uid,
                        owner_gid=ident.gid, bits=bits, pool=pool_hex)
        self.puddles[hexid] = rec
        self._reserve(hexid, rec)
        if pool_hex is not None:
            self.pools[pool_hex].members.append(hexid)
        self._persist()
        return self._capability(hexid, rec, read_only=False)

    def op_get_exist_puddle(self, ident, payload):
        hexid = payload["uuid"]
        want_write = bool(payload.get("want_write", True))
        reserve_only = bool(payload.get("reserve_only", False))
        rec = self._require(hexid)
        if not perm_allows(rec, ident.uid, ident.gid, write=False):
            raise PermissionDenied(f"no read access to {hexid}")
        if want_write and not perm_allows(rec, ident.uid, ident.gid, write=True):
            raise PermissionDenied(f"no write access to {hexid}")
        self._reserve(hexid, rec)
        if reserve_only:
            self.frontier.add(hexid)
            self._persist()
            return {"uuid": hexid, "base": rec.base,
                    "import_base": rec.import_base, "pending": rec.pending,
                    "reserved": True}
        self.frontier.discard(hexid)
        self._persist()
        return self._capability(hexid, rec, read_only=not want_write)

    def op_free_puddle(self, ident, payload):
        hexid = payload["uuid"]
        rec = self._require(hexid)
        if ident.uid != rec.owner_uid:
            raise NotOwner(f"{hexid} belongs to uid {rec.owner_uid}")
        for pool in self.pools.values():
            if pool.root == hexid:
                raise PoolBusy(f"{hexid} is the root of pool {pool.name!r}")
        if rec.pool is not None and hexid in self.pools.get(rec.pool, PoolRec("", "")).members:
            self.pools[rec.pool].members.remove(hexid)
        if hexid in self.logspaces:
            self.logspaces.remove(hexid)
        if rec.base:
            self.space.release_address(self._pid(hexid))
        self.space.remove_exclusion(("old", hexid))
        self.frontier.discard(hexid)
        del self.puddles[hexid]
        self._persist()
        self.machine.forget(f"{hexid}.pud")
        (self.data_dir / f"{hexid}.pud").unlink(missing_ok=True)
        (self.data_dir / f"{hexid}.pud.durable").unlink(missing_ok=True)
        return {"freed": hexid}

    def op_reg_log_space(self, ident, payload):
        hexid = payload["uuid"]
        rec = self._require(hexid)
        if ident.uid != rec.owner_uid:
            raise NotOwner(f"{hexid} belongs to uid {rec.owner_uid}")
        if hexid in self.logspaces:
            raise AlreadyRegistered(f"{hexid} is already a log space")
        if ident.session in self._sessions_logspace:
            raise AlreadyRegistered("session already registered a log space")
        self.logspaces.append(hexid)
        self._sessions_logspace[ident.session] = hexid
        self._persist()
        return {"registered": hexid}

    def op_reg_ref_map(self, ident, payload):
        rmap = ReferenceMap.from_wire(payload)
        added = self.types.register(rmap)
        if added:
            self._persist()
        return {"registered": rmap.type_id, "new": added}

    def op_create_pool(self, ident, payload):
        name = payload["name"]
        root_heap = int(payload.get("root_heap", 2 * 1024 * 1024))
        if not name:
            raise BadSize("pool name must be non-empty")
        if any(p.name == name for p in self.pools.values()):
            raise AlreadyRegistered(f"pool {name!r} exists")
        pid, hdr, dom = core.create_puddle(self.machine, root_heap)
        hexid = pid.hex
        pool_hex = uuidlib.uuid4().hex
        rec = PuddleRec(hdr.total_size, root_heap, owner_uid=ident.uid,
                        owner_gid=ident.gid, bits=int(payload.get("bits", DEFAULT_BITS)),
                        pool=pool_hex)
        self.puddles[hexid] = rec
        self._reserve(hexid, rec)
        self.pools[pool_hex] = PoolRec(name, hexid, [hexid])
        self._persist()
        return self._pool_wire(pool_hex)

    def _find_pool(self, key: str) -> str:
        for h, p in self.pools.items():
            if p.name == key:
                return h
        if key in self.pools:
            return key
        raise UnknownUuid(f"pool {key!r}")

    def op_open_pool(self, ident, payload):
        pool_hex = self._find_pool(payload["pool"])
        pool = self.pools[pool_hex]
        root_rec = self._require(pool.root)
        if not perm_allows(root_rec, ident.uid, ident.gid, write=False):
            raise PermissionDenied(f"no read access to pool {pool.name!r}")
        return self._pool_wire(pool_hex)

    # -- export / import ------------------------------------------------------

    def _pool_quiescent(self, pool_hex: str):
        members = set(self.pools[pool_hex].members)
        bases = {}
        for m in members:
            rec = self.puddles[m]
            if rec.pending:
                raise PoolBusy(f"member {m} awaits pointer rewrite")
            if rec.base:
                bases[m] = (rec.base, rec.base + rec.total)
        for q in self.quarantine:
            if pool_hex in q.get("pools", []):
                raise PoolBusy(f"pool flagged by quarantined log: {q['reason']}")
        # any active log holding in-range entries targeting the pool means
        # recovery has not happened: refuse rather than export limbo
        for ls_hex in self.logspaces:
            try:
                for head_hex, status in self._logspace_view(ls_hex).entries():
                    if status != LS_ACTIVE or head_hex.hex not in self.puddles:
                        continue
                    log = self._log(head_hex.hex)
                    rng = log.seq_range
                    for e in log.entries():
                        if not entry_valid(e, rng) or e.volatile_target:
                            continue
                        for lo, hi in bases.values():
                            if lo <= e.target_addr < hi:
                                raise PoolBusy("pool has unrecovered log entries")
            except (CorruptLog, CorruptMetadata):
                continue

    def _heap_for(self, hexid: str) -> PuddleHeap:
        rec = self._require(hexid)
        dom = self._dom(hexid)
        hdr = read_header(dom)
        base = rec.base or rec.import_base
        return PuddleHeap(hdr, base,
                          load=lambda a, n, d=dom, b=base: d.load(a - b, n),
                          store=lambda a, p, d=dom, b=base: d.store(a - b, p))

    def op_export_pool(self, ident, payload):
        pool_hex = self._find_pool(payload["pool"])
        out_path = payload["out"]
        pool = self.pools[pool_hex]
        self._refresh_pending(pool_hex)
        for m in pool.members:
            if not perm_allows(self.puddles[m], ident.uid, ident.gid, write=False):
                raise PermissionDenied(f"no read access to member {m}")
        self._pool_quiescent(pool_hex)
        members = [pool.root] + [m for m in pool.members if m != pool.root]
        used_types = set()
        for m in members:
            for desc in self._heap_for(m).iterate_objects():
                used_types.add(desc.type_id)
        missing = [t for t in used_types if self.types.get(t) is None]
        if missing:
            raise MissingReferenceMap(
                f"no reference map registered for type ids {missing}")
        pud_entries = []
        for m in members:
            rec = self.puddles[m]
            pud_entries.append(BundlePuddle(self._pid(m), rec.base, rec.total,
                                            rec.heap))
        manifest = BundleManifest(pool.name, bytes.fromhex(pool_hex),
                                  self._pid(pool.root), pud_entries,
                                  [self.types.maps[t] for t in sorted(used_types)])
        write_bundle(out_path, manifest,
                     (self._dom(m).working_bytes() for m in members))
        total = sum(self.puddles[m].total for m in members)
        return {"path": str(out_path), "puddles": len(members), "bytes": total}

    def op_import_bundle(self, ident, payload):
        path = payload["path"]
        if not Path(path).exists():
            raise CorruptBundle(f"{path} does not exist")
        manifest, images = read_bundle(path)
        pool_hex = uuidlib.uuid4().hex
        name = manifest.pool_name
        if any(p.name == name for p in self.pools.values()):
            name = f"{name}@{pool_hex[:8]}"
        new_members = []
        for bp, img in zip(manifest.puddles, images):
            pid = PuddleId.new()
            hexid = pid.hex
            dom = self.machine.open_domain(f"{hexid}.pud", bp.total_size)
            dom.store(0, img)
            hdr = read_header(dom)
            hdr.uuid = pid
            hdr.assigned_base = 0
            dom.store(0, hdr.pack())
            dom.store(REGION_OFFSET + REGION_IMPORT_BASE,
                      struct.pack("<Q", bp.assigned_base))
            dom.store(REGION_OFFSET + REGION_FLAGS, bytes([FLAG_PENDING_REWRITE]))
            dom.flush(0, bp.total_size)
            dom.fence()
            rec = PuddleRec(bp.total_size, bp.heap_size, base=0,
                            import_base=bp.assigned_base, owner_uid=ident.uid,
                            owner_gid=ident.gid, pool=pool_hex, pending=True)
            self.puddles[hexid] = rec
            self.space.add_exclusion(("old", hexid), bp.assigned_base, bp.total_size)
            new_members.append(hexid)
        for m in manifest.typemaps:
            self.types.register(m)
        self.pools[pool_hex] = PoolRec(name, new_members[0], new_members)
        self._persist()
        return self._pool_wire(pool_hex)

    def op_status(self, ident, payload):
        return {"puddles": len(self.puddles),
                "pools": {h: {"name": p.name, "root": p.root,
                              "members": len(p.members)}
                          for h, p in self.pools.items()},
                "logspaces": list(self.logspaces),
                "frontier": sorted(self.frontier),
                "quarantine": self.quarantine,
                "last_recovery": self.last_recovery,
                "orphans_removed": self.orphans_removed,
                "space_base": self.space.base, "space_len": self.space.length}

    # -- recovery ---------------------------------------------------------------

    def _logspace_view(self, hexid: str) -> LogSpace:
        rec = self._require(hexid)
        dom = self._dom(hexid)
        return LogSpace(dom, rec.header_size, rec.heap)

    def _log_view(self, hexid: str) -> LogView:
        rec = self._require(hexid)
        dom = self._dom(hexid)
        return LogView(dom, rec.header_size, rec.heap)

    def _log(self, head_hex: str) -> Log:
        return Log(self._log_view(head_hex),
                   resolver=lambda pid: self._log_view(pid.hex))

    def recovery_all(self) -> dict:
        """Replay every recoverable log before any client is served."""
        report = {"replayed": [], "quarantined": [], "skipped": [],
                  "applied_entries": 0, "started": time.time()}
        if self.recovery_delay:
            time.sleep(self.recovery_delay)  # harness hook for gating tests

        def quarantine(ls_hex, head_hex, reason, pools):
            entry = {"logspace": ls_hex, "log": head_hex, "reason": reason,
                     "pools": sorted(pools)}
            self.quarantine.append(entry)
            report["quarantined"].append(entry)
            if head_hex is not None:
                try:
                    self._logspace_view(ls_hex).set_status(
                        self._pid(head_hex), LS_INVALID)
                except PuddleError:
                    pass

        for ls_hex in list(self.logspaces):
            if ls_hex not in self.puddles:
                report["skipped"].append({"logspace": ls_hex,
                                          "reason": "log space puddle missing"})
                continue
            owner = self.puddles[ls_hex]
            try:
                entries = self._logspace_view(ls_hex).entries()
            except PuddleError as e:
                quarantine(ls_hex, None, f"unreadable log space: {e}", [])
                continue
            for head_id, status in entries:
                head_hex = head_id.hex
                if status != LS_ACTIVE:
                    continue
                if head_hex not in self.puddles:
                    quarantine(ls_hex, head_hex, "log puddle missing", [])
                    continue
                try:
                    log = self._log(head_hex)
                    all_entries = log.entries()
                    rng = log.seq_range
                except PuddleError as e:
                    quarantine(ls_hex, head_hex, f"corrupt log: {e}", [])
                    continue
                if any(not e.checksum_ok for e in all_entries):
                    pools = self._target_pools(all_entries)
                    quarantine(ls_hex, head_hex, "checksum mismatch", pools)
                    continue
                valid = [e for e in all_entries if entry_valid(e, rng)]
                # permission view of the crashed owner: replay may only touch
                # puddles the log-space owner could write
                violation = None
                for e in valid:
                    if e.volatile_target:
                        continue
                    res = self.space.reservation_at(e.target_addr)
                    if res is None:
                        violation = f"target 0x{e.target_addr:x} resolves to no puddle"
                        break
                    tpid, tbase, tsize = res
                    if e.target_addr + e.data_size > tbase + tsize:
                        violation = f"entry at 0x{e.target_addr:x} spans puddles"
                        break
                    trec = self.puddles[tpid.hex]
                    if not perm_allows(trec, owner.owner_uid, owner.owner_gid,
                                       write=True):
                        violation = (f"owner uid {owner.owner_uid} cannot write "
                                     f"{tpid.hex}")
                        break
                if violation is not None:
                    quarantine(ls_hex, head_hex, violation,
                               self._target_pools(valid))
                    continue
                n = log.replay(self._recovery_write, self._recovery_persist,
                               skip_volatile=True)
                log.set_sequence_range(4, 4)
                try:
                    self._logspace_view(ls_hex).set_status(head_id, LS_DROPPED)
                except PuddleError:
                    pass
                report["applied_entries"] += n
                report["replayed"].append({"logspace": ls_hex, "log": head_hex,
                                           "entries": n})
        report["finished"] = time.time()
        return report

    def _target_pools(self, entries) -> set:
        """Pools a suspect log aims at; best-effort even for corrupt entries."""
        pools = set()
        for e in entries:
            if getattr(e, "volatile_target", False):
                continue
            res = self.space.reservation_at(e.target_addr)
            if res is not None:
                rec = self.puddles.get(res[0].hex)
                if rec is not None and rec.pool is not None:
                    pools.add(rec.pool)
        return pools

    def _recovery_write(self, addr, data):
        res = self.space.reservation_at(addr)
        tpid, tbase, _ = res
        self._dom(tpid.hex).store(addr - tbase, data)

    def _recovery_persist(self, addr, n):
        res = self.space.reservation_at(addr)
        tpid, tbase, _ = res
        dom = self._dom(tpid.hex)
        dom.flush(addr - tbase, n)
        dom.fence()

    # -- dispatch / lifecycle -----------------------------------------------

    _OPS = {
        wire.PING: "op_ping",
        wire.HELLO: "op_hello",
        wire.GET_NEW_PUDDLE: "op_get_new_puddle",
        wire.GET_EXIST_PUDDLE: "op_get_exist_puddle",
        wire.FREE_PUDDLE: "op_free_puddle",
        wire.REG_LOG_SPACE: "op_reg_log_space",
        wire.REG_REF_MAP: "op_reg_ref_map",
        wire.CREATE_POOL: "op_create_pool",
        wire.OPEN_POOL: "op_open_pool",
        wire.EXPORT_POOL: "op_export_pool",
        wire.IMPORT_BUNDLE: "op_import_bundle",
        wire.STATUS: "op_status",
    }

    def request(self, ident: Identity, code: int, payload: dict):
        """(ok, payload) with every mutating op durably recorded first."""
        name = self._OPS.get(code)
        if name is None:
            raise ProtocolError(f"unknown request code {code}")
        with self.lock:
            return getattr(self, name)(ident, payload)

    def active_logs_remain(self) -> bool:
        for ls_hex in self.logspaces:
            if ls_hex not in self.puddles:
                continue
            try:
                for head, status in self._logspace_view(ls_hex).entries():
                    if status != LS_ACTIVE or head.hex not in self.puddles:
                        continue
                    log = self._log(head.hex)
                    rng = log.seq_range
                    if any(entry_valid(e, rng) for e in log.entries()):
                        return True
            except PuddleError:
                return True
        return False

    def shutdown(self):
        with self.lock:
            if getattr(self, "_shut", False):
                return
            self._shut = True
            clean = not self.active_logs_remain()
            self._persist(clean=clean)
            fcntl.flock(self._lock_fd, fcntl.LOCK_UN)
            os.close(self._lock_fd)

    def abandon(self):
        """Release the dir lock with no state writes (simulated power cut)."""
        with self.lock:
            if getattr(self, "_shut", False):
                return
            self._shut = True
            fcntl.flock(self._lock_fd, fcntl.LOCK_UN)
            os.close(self._lock_fd)


class LocalTransport:
    """In-process transport for embedded harnesses and crash sweeps."""

    def __init__(self, service: PuddleService, ident: Optional[Identity] = None):
        self.service = service
        self.ident = ident or Identity(os.getuid(), os.getgid(), os.getpid())

    def request(self, code: int, payload: dict):
        return self.service.request(self.ident, code, payload), None

    def close(self):
        pass


class SocketTransport:
    """Client side of the UNIX-socket protocol."""

    def __init__(self, socket_path):
        self.sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        try:
            self.sock.connect(str(socket_path))
        except OSError as e:
            from .errors import DaemonUnreachable
            raise DaemonUnreachable(f"{socket_path}: {e}") from None
        self._req = 0
        self._lock = threading.Lock()

    def request(self, code: int, payload: dict):
        with self._lock:
            self._req += 1
            rid = self._req
            wire.send_frame(self.sock, code, rid, payload)
            rcode, rrid, rpayload, fds = wire.recv_frame(self.sock)
        if rrid != rid:
            raise ProtocolError(f"response id {rrid} for request {rid}")
        if rcode == wire.ERR:
            from .errors import error_for_code
            raise error_for_code(int(rpayload.get("error", 1)),
                                 rpayload.get("message", ""))
        if rcode != wire.OK:
            raise ProtocolError(f"unexpected response code {rcode}")
        return rpayload, (fds or None)

    def close(self):
        self.sock.close()


def _peer_identity(conn) -> Identity:
    creds = conn.getsockopt(socket.SOL_SOCKET, socket.SO_PEERCRED,
                            struct.calcsize("3i"))
    pid, uid, gid = struct.unpack("3i", creds)
    return Identity(uid, gid, pid)


def _serve_connection(service: PuddleService, conn):
    ident = _peer_identity(conn)
    try:
        while True:
            try:
                code, rid, payload, _ = wire.recv_frame(conn)
            except ConnectionError:
                return
            except ProtocolError as e:
                try:
                    wire.send_frame(conn, wire.ERR, 0,
                                    {"error": ProtocolError.code, "message": str(e)})
                finally:
                    return
            fds = None
            try:
                result = service.request(ident, code, payload)
                if (isinstance(result, dict) and result.get("backend") == "fd"
                        and "read_only" in result and "path" in result):
                    mode = os.O_RDONLY if result["read_only"] else os.O_RDWR
                    fd = os.open(result["path"], mode)
                    dfd = os.open(result["path"] + ".durable", mode)
                    fds = [fd, dfd]
                wire.send_frame(conn, wire.OK, rid, result, fds=fds)
            except PuddleError as e:
                wire.send_frame(conn, wire.ERR, rid,
                                {"error": e.code, "message": str(e)})
            finally:
                if fds:
                    for fd in fds:
                        os.close(fd)
    finally:
        conn.close()


def serve(socket_path, data_dir, *, trust_ids=False, cap_backend="fd",
          ready_event=None, stop_event=None, recovery_delay=0.0):
    """Run the daemon: recovery first, then accept client frames forever."""
    service = PuddleService(data_dir, trust_ids=trust_ids,
                            cap_backend=cap_backend,
                            recovery_delay=recovery_delay)
    socket_path = Path(socket_path)
    socket_path.unlink(missing_ok=True)
    srv = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    srv.bind(str(socket_path))
    srv.listen(64)
    srv.settimeout(0.2)
    if ready_event is not None:
        ready_event.set()
    try:
        while stop_event is None or not stop_event.is_set():
            try:
                conn, _ = srv.accept()
            except socket.timeout:
                continue
            t = threading.Thread(target=_serve_connection,
                                 args=(service, conn), daemon=True)
            t.start()
    finally:
        srv.close()
        socket_path.unlink(missing_ok=True)
        service.shutdown()
    return service
