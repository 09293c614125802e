"""Recovery-log structures: log space, logs, and log entries.

This is the contract shared by the library (normal commit path) and the
daemon (post-crash replay): everything needed to apply a log lives on
media, gated by a per-log sequence range so commit stages can be switched
with one atomic durable store.  On-media encodings are bit-exact and
documented in docs/log-format.md.

A log lives in the heap of a designated log puddle and may chain into
further puddles when it runs out of room.  Entry layout (8-byte aligned)::

    off  0  target_addr  u64     global-space address (or volatile range)
    off  8  data_size    u32
    off 12  seq          u32
    off 16  flags        u32     bit0 order (1=backward), bit1 volatile target
    off 20  checksum     u32     CRC-32C(target_addr|data_size|seq|flags|payload)
    off 24  reserved     u64
    off 32  payload      data_size bytes, padded to the next 8-byte boundary
"""

import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

from .checksum import crc32c
from .core import PuddleId
from .errors import BadTarget, CorruptLog, InvalidRange, LogFull

LOG_HDR_SIZE = 64
ENTRY_HDR_SIZE = 32

FLAG_BACKWARD = 0x1
FLAG_VOLATILE = 0x2

# log-space entry statuses
LS_ACTIVE = 1
LS_DROPPED = 2
LS_INVALID = 3

_LOG_HDR = struct.Struct("<QQQQQ16s")      # seq_lo seq_hi next_free last_entry max_size continuation
_ENTRY_HDR = struct.Struct("<QIIIIQ")      # target size seq flags checksum reserved
_ENTRY_CRC = struct.Struct("<QIII")        # checksummed header prefix
_SEQ_RANGE = struct.Struct("<QQ")
_CURSOR = struct.Struct("<QQ")             # next_free + last_entry, one 16 B store


def _align8(n: int) -> int:
    return (n + 7) & ~7


@dataclass
class LogEntry:
    offset: int          # heap offset of the entry header within its puddle
    member: int          # chain position of the puddle holding it
    target_addr: int
    data_size: int
    seq: int
    flags: int
    checksum: int
    payload: bytes

    @property
    def backward(self) -> bool:
        return bool(self.flags & FLAG_BACKWARD)

    @property
    def volatile_target(self) -> bool:
        return bool(self.flags & FLAG_VOLATILE)

    @property
    def checksum_ok(self) -> bool:
        return self.checksum == crc32c(
            _ENTRY_CRC.pack(self.target_addr, self.data_size, self.seq,
                            self.flags) + self.payload)


def entry_valid(entry: LogEntry, seq_range: tuple) -> bool:
    """True iff the entry replays under the range: lo < seq < hi, intact."""
    lo, hi = seq_range
    return lo < entry.seq < hi and entry.checksum_ok


class LogView:
    """The log structure inside one puddle's heap."""

    def __init__(self, dom, heap_off: int, heap_size: int):
        self.dom = dom
        self.heap_off = heap_off
        self.heap_size = heap_size

    def format(self):
        hdr = _LOG_HDR.pack(0, 0, LOG_HDR_SIZE, 0, self.heap_size, b"\x00" * 16)
        self.dom.store(self.heap_off, hdr)
        self.dom.flush(self.heap_off, LOG_HDR_SIZE)
        self.dom.fence()

    # -- header fields ---------------------------------------------------

    def _read_hdr(self):
        return _LOG_HDR.unpack(self.dom.load(self.heap_off, _LOG_HDR.size))

    @property
    def seq_range(self) -> tuple:
        lo, hi = _SEQ_RANGE.unpack(self.dom.load(self.heap_off, 16))
        return lo, hi

    @property
    def next_free(self) -> int:
        return struct.unpack("<Q", self.dom.load(self.heap_off + 16, 8))[0]

    @property
    def last_entry(self) -> int:
        return struct.unpack("<Q", self.dom.load(self.heap_off + 24, 8))[0]

    @property
    def max_size(self) -> int:
        return struct.unpack("<Q", self.dom.load(self.heap_off + 32, 8))[0]

    @property
    def continuation(self) -> Optional[PuddleId]:
        raw = bytes(self.dom.load(self.heap_off + 40, 16))
        return PuddleId(raw) if raw != b"\x00" * 16 else None

    def set_sequence_range(self, lo: int, hi: int):
        if lo > hi:
            raise InvalidRange(f"sequence range ({lo}, {hi}) inverted")
        self.dom.store(self.heap_off, _SEQ_RANGE.pack(lo, hi))
        self.dom.flush(self.heap_off, 16)
        self.dom.fence()

    def set_continuation(self, pid: PuddleId):
        self.dom.store(self.heap_off + 40, pid.raw)
        self.dom.flush(self.heap_off + 40, 16)
        self.dom.fence()

    def reset_cursor(self):
        """Rewind to empty.  Only safe while the range admits nothing."""
        self.dom.store(self.heap_off + 16, _CURSOR.pack(LOG_HDR_SIZE, 0))
        self.dom.flush(self.heap_off + 16, 16)
        self.dom.fence()

    # -- entries -----------------------------------------------------------

    def try_append(self, target_addr: int, payload: bytes, seq: int,
                   flags: int) -> Optional[int]:
        """Append one entry durably; None if this puddle is out of room.

        The entry bytes are flushed and fenced before the cursor advances
        durably, so a crash in between leaves the entry invisible.
        """
        if not payload:
            raise BadTarget("empty payload")
        size = len(payload)
        off = self.next_free
        end = _align8(off + ENTRY_HDR_SIZE + size)
        if end > self.max_size:
            return None
        crc = crc32c(_ENTRY_CRC.pack(target_addr, size, seq, flags) + payload)
        hdr = _ENTRY_HDR.pack(target_addr, size, seq, flags, crc, 0)
        base = self.heap_off + off
        self.dom.store(base, hdr + payload)
        self.dom.flush(base, ENTRY_HDR_SIZE + size)
        self.dom.fence()
        self.dom.store(self.heap_off + 16, _CURSOR.pack(end, off))
        self.dom.flush(self.heap_off + 16, 16)
        self.dom.fence()
        return off

    def scan(self, member: int = 0) -> list:
        """All entries in append order.  Structural damage raises CorruptLog."""
        limit = self.next_free
        if limit < LOG_HDR_SIZE or limit > self.max_size or self.max_size > self.heap_size:
            raise CorruptLog(f"log cursor {limit} outside [{LOG_HDR_SIZE}, {self.max_size}]")
        out = []
        off = LOG_HDR_SIZE
        while off < limit:
            if off + ENTRY_HDR_SIZE > limit:
                raise CorruptLog(f"entry header at {off} crosses cursor {limit}")
            target, size, seq, flags, crc, _ = _ENTRY_HDR.unpack(
                self.dom.load(self.heap_off + off, ENTRY_HDR_SIZE))
            if size == 0 or off + ENTRY_HDR_SIZE + size > limit:
                raise CorruptLog(f"entry at {off} overruns cursor (size {size})")
            payload = bytes(self.dom.load(self.heap_off + off + ENTRY_HDR_SIZE, size))
            out.append(LogEntry(off, member, target, size, seq, flags, crc, payload))
            off = _align8(off + ENTRY_HDR_SIZE + size)
        return out


class Log:
    """A possibly-chained log: one head view plus continuation members.

    The head's sequence range governs the whole chain.  ``resolver`` turns
    a continuation puddle id into the LogView stored inside that puddle.
    """

    def __init__(self, head: LogView,
                 resolver: Optional[Callable[[PuddleId], LogView]] = None):
        self.head = head
        self.resolver = resolver
        self._members = [head]

    def _sync_members(self):
        tail = self._members[-1]
        nxt = tail.continuation
        while nxt is not None:
            if self.resolver is None:
                raise CorruptLog("chained log but no resolver provided")
            view = self.resolver(nxt)
            self._members.append(view)
            nxt = view.continuation

    @property
    def seq_range(self):
        return self.head.seq_range

    def set_sequence_range(self, lo: int, hi: int):
        self.head.set_sequence_range(lo, hi)

    def append_entry(self, target_addr: int, payload: bytes, seq: int,
                     flags: int) -> tuple:
        """(member index, offset) of the appended entry; LogFull when no
        member has room (chain a fresh puddle and retry).

        Entries fill members strictly in chain order so replay order equals
        append order across the whole chain.
        """
        self._sync_members()
        idx = 0
        for i in range(len(self._members) - 1, -1, -1):
            if self._members[i].next_free != LOG_HDR_SIZE:
                idx = i
                break
        while idx < len(self._members):
            off = self._members[idx].try_append(target_addr, payload, seq, flags)
            if off is not None:
                return idx, off
            idx += 1
        raise LogFull("no log member has room")

    def reset_all(self):
        """Rewind every member.  Only safe while the range admits nothing."""
        self._sync_members()
        for view in self._members:
            if view.next_free != LOG_HDR_SIZE or view.last_entry != 0:
                view.reset_cursor()

    def dirty(self) -> bool:
        self._sync_members()
        return any(v.next_free != LOG_HDR_SIZE for v in self._members)

    def chain_log_puddle(self, new_view: LogView, new_id: PuddleId):
        """Link a fresh member; durable before any entry lands in it."""
        self._sync_members()
        if new_view.next_free != LOG_HDR_SIZE or new_view.last_entry != 0:
            raise CorruptLog("chained puddle must hold an empty log")
        self._members[-1].set_continuation(new_id)
        self._members.append(new_view)

    def entries(self) -> list:
        self._sync_members()
        out = []
        for i, view in enumerate(self._members):
            out.extend(view.scan(member=i))
        return out

    def replay(self, write, persist, skip_volatile: bool) -> int:
        """Apply valid entries; returns how many were applied.

        ``write(addr, bytes)`` and ``persist(addr, len)`` are supplied by
        the caller (global space during normal execution, a permission-
        checked writer during daemon recovery).  Backward-order entries are
        applied last-to-first, then forward-order ones first-to-last;
        invalid entries are skipped.  Copying is idempotent.
        """
        rng = self.seq_range
        valid = [e for e in self.entries() if entry_valid(e, rng)]
        applied = 0
        for e in reversed([e for e in valid if e.backward]):
            if skip_volatile and e.volatile_target:
                continue
            write(e.target_addr, e.payload)
            persist(e.target_addr, e.data_size)
            applied += 1
        for e in (e for e in valid if not e.backward):
            if skip_volatile and e.volatile_target:
                continue
            write(e.target_addr, e.payload)
            persist(e.target_addr, e.data_size)
            applied += 1
        return applied


def replay_log(log: Log, write, persist, skip_volatile: bool = False) -> int:
    return log.replay(write, persist, skip_volatile)


class LogSpace:
    """Per-client directory of log puddles, stored in its own puddle.

    Heap layout: count u64 at offset 0, then 24 B entries
    (uuid 16 B, status u8, 7 B pad).  Registered once with the daemon;
    afterwards the owner edits it without daemon involvement.
    """

    ENTRY = struct.Struct("<16sB7x")

    def __init__(self, dom, heap_off: int, heap_size: int):
        self.dom = dom
        self.heap_off = heap_off
        self.heap_size = heap_size

    def format(self):
        self.dom.store(self.heap_off, struct.pack("<Q", 0))
        self.dom.flush(self.heap_off, 8)
        self.dom.fence()

    @property
    def count(self) -> int:
        return struct.unpack("<Q", self.dom.load(self.heap_off, 8))[0]

    def _slot(self, i: int) -> int:
        return self.heap_off + 8 + i * self.ENTRY.size

    def entries(self) -> list:
        out = []
        for i in range(self.count):
            raw, status = self.ENTRY.unpack(self.dom.load(self._slot(i), self.ENTRY.size))
            out.append((PuddleId(raw), status))
        return out

    def add(self, pid: PuddleId, status: int = LS_ACTIVE):
        i = self.count
        if self._slot(i + 1) - self.heap_off > self.heap_size:
            raise LogFull("log space puddle full")
        self.dom.store(self._slot(i), self.ENTRY.pack(pid.raw, status))
        self.dom.flush(self._slot(i), self.ENTRY.size)
        self.dom.fence()
        self.dom.store(self.heap_off, struct.pack("<Q", i + 1))
        self.dom.flush(self.heap_off, 8)
        self.dom.fence()

    def set_status(self, pid: PuddleId, status: int):
        for i in range(self.count):
            raw, _ = self.ENTRY.unpack(self.dom.load(self._slot(i), self.ENTRY.size))
            if raw == pid.raw:
                self.dom.store(self._slot(i) + 16, bytes([status]))
                self.dom.flush(self._slot(i) + 16, 1)
                self.dom.fence()
                return
        raise BadTarget(f"{pid} not in log space")

    def status_of(self, pid: PuddleId) -> Optional[int]:
        for raw_id, status in self.entries():
            if raw_id == pid:
                return status
        return None
