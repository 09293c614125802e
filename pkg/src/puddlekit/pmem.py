"""Emulated persistence domain with cache-line flush/fence semantics.

A domain wraps a memory-mapped backing file (the working image, which sees
every store) and a ``<path>.durable`` sidecar (the durable image, which only
advances when a fence retires flushed lines).  Because both images are
explicit, power loss can be injected deterministically between any two
persistence events: the post-crash content is the durable image plus an
optional subset of flushed-but-unfenced lines.

Line-state machine (64 B lines, matching clwb granularity):

    clean --store--> dirty --flush--> flushed-pending --fence--> durable
    durable/flushed-pending --store--> dirty          (write-back forgotten)

Stores never tear below line granularity; 8-byte aligned stores are atomic.
Loads are not persistence events.
"""

import mmap
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    CapacityNotAligned,
    InvalidRange,
    IoFailure,
    OutOfBounds,
    UnwritableRange,
)

LINE_SIZE = 64
PAGE_SIZE = 4096

# line states
CLEAN = 0
DIRTY = 1
PENDING = 2
DURABLE = 3

_DIRTY_TO_PENDING = bytes(PENDING if s == DIRTY else s for s in range(256))

DROP_ALL_UNFENCED = "drop-all-unfenced"
SUBSET = "subset"


class EventClock:
    """Monotonic counter shared by every domain of one emulated machine.

    Sharing one clock gives a total order over persistence events across
    files, so a single crash point yields a consistent multi-file image.
    """

    __slots__ = ("now",)

    def __init__(self):
        self.now = 0

    def tick(self) -> int:
        self.now += 1
        return self.now


@dataclass
class CrashPlan:
    """Where to cut power and what happens to in-flight lines.

    ``crash_event`` is the last event that executed before the power cut.
    ``drop-all-unfenced`` reverts every line without a completed
    flush+fence; ``subset`` additionally keeps the i-th flushed-pending
    line (ascending line index) iff bit i of ``subset_mask`` is set.
    """

    crash_event: int
    pending_policy: str = DROP_ALL_UNFENCED
    subset_mask: int = 0


@dataclass
class TraceEvent:
    event_no: int
    kind: str  # "store" | "flush" | "fence"
    offset: int
    length: int
    payload: bytes = b""


class PersistentDomain:
    """One mappable persistence medium backed by a file pair.

    Single writer; concurrent readers are safe.  All mutation goes through
    store/flush/fence so the event trace is the complete persistence
    history.
    """

    def __init__(self, path, capacity: int, *, clock: Optional[EventClock] = None,
                 record_trace: bool = False, readonly: bool = False,
                 trace_log: Optional[str] = None, fds: Optional[tuple] = None):
        path = Path(path)
        if capacity <= 0 or capacity % PAGE_SIZE != 0:
            raise CapacityNotAligned(f"capacity {capacity} not a page multiple")
        self.path = path
        self.capacity = capacity
        self.line_size = LINE_SIZE
        self.n_lines = capacity // LINE_SIZE
        self.clock = clock if clock is not None else EventClock()
        self.readonly = readonly
        self.closed = False
        self.event_counter = 0  # last event number drawn by this domain

        mode = os.O_RDONLY if readonly else os.O_RDWR
        if fds is not None:
            # capability transfer: reuse handles instead of opening by path
            self._fd, self._dfd = fds
            dfresh = False
        else:
            fresh = not path.exists()
            self._fd = os.open(path, mode | (0 if readonly else os.O_CREAT), 0o600)
            if os.fstat(self._fd).st_size != capacity:
                if not fresh and os.fstat(self._fd).st_size > capacity:
                    os.close(self._fd)
                    raise CapacityNotAligned(
                        f"{path}: file larger than requested capacity")
                os.ftruncate(self._fd, capacity)
            dpath = Path(str(path) + ".durable")
            dfresh = not dpath.exists()
            if readonly and dfresh:
                raise IoFailure(f"{dpath}: missing durable sidecar for read-only open")
            self._dfd = os.open(dpath, mode | (0 if readonly else os.O_CREAT), 0o600)
            if os.fstat(self._dfd).st_size != capacity and not readonly:
                os.ftruncate(self._dfd, capacity)
        access = mmap.ACCESS_READ if readonly else mmap.ACCESS_WRITE
        self._work = mmap.mmap(self._fd, capacity, access=access)
        self._dur = mmap.mmap(self._dfd, capacity, access=access)
        if dfresh and not readonly:
            # no sidecar yet: everything present now counts as durable
            self._dur[:] = self._work[:]

        self.line_state = bytearray(self.n_lines)  # all CLEAN
        if not dfresh:
            self._mark_undurable_lines()

        self._pending_ranges = []  # line ranges flushed since last fence
        self.record_trace = record_trace
        self.trace: list[TraceEvent] = []
        self._initial_image = bytes(self._work[:]) if record_trace else None
        self._trace_log = open(trace_log, "a") if trace_log else None

    def _mark_undurable_lines(self):
        """Reopen path: stores that never fenced must stay revertible."""
        w = np.frombuffer(self._work, dtype=np.uint8).reshape(self.n_lines, LINE_SIZE)
        d = np.frombuffer(self._dur, dtype=np.uint8).reshape(self.n_lines, LINE_SIZE)
        differs = (w != d).any(axis=1)
        if differs.any():
            st = np.frombuffer(self.line_state, dtype=np.uint8)
            st[differs] = DIRTY

    # -- event plumbing ----------------------------------------------------

    def _event(self, kind, offset, length, payload=b""):
        no = self.clock.tick()
        self.event_counter = no
        if self.record_trace:
            self.trace.append(TraceEvent(no, kind, offset, length, payload))
        if self._trace_log is not None:
            self._trace_log.write(f"{no} {kind} {offset} {length}\n")
        return no

    # -- data plane --------------------------------------------------------

    def store(self, offset: int, payload: bytes) -> int:
        """Write bytes to the working image; touched lines become dirty."""
        if self.readonly:
            raise UnwritableRange(f"{self.path} is mapped read-only")
        n = len(payload)
        if n == 0:
            raise InvalidRange("empty store")
        if offset < 0 or offset + n > self.capacity:
            raise OutOfBounds(f"store [{offset}, {offset + n}) beyond {self.capacity}")
        self._work[offset:offset + n] = payload
        lo = offset // LINE_SIZE
        hi = (offset + n - 1) // LINE_SIZE + 1
        self.line_state[lo:hi] = b"\x01" * (hi - lo)
        return self._event("store", offset, n,
                           bytes(payload) if self.record_trace else b"")

    def load(self, offset: int, n: int) -> bytes:
        if offset < 0 or offset + n > self.capacity:
            raise OutOfBounds(f"load [{offset}, {offset + n}) beyond {self.capacity}")
        return self._work[offset:offset + n]

    def flush(self, offset: int, length: int) -> int:
        """Initiate write-back of dirty lines covering [offset, offset+length)."""
        if offset < 0 or length < 0 or offset + length > self.capacity:
            raise OutOfBounds(f"flush [{offset}, {offset + length}) beyond capacity")
        lo = offset // LINE_SIZE
        hi = (offset + length - 1) // LINE_SIZE + 1 if length else lo
        self.line_state[lo:hi] = self.line_state[lo:hi].translate(_DIRTY_TO_PENDING)
        if length:
            self._pending_ranges.append((lo, hi))
        return self._event("flush", offset, length)

    def fence(self) -> int:
        """Retire every flushed-pending line into the durable image."""
        state = self.line_state
        work = self._work
        dur = self._dur
        for lo, hi in self._pending_ranges:
            for ln in range(lo, hi):
                if state[ln] == PENDING:
                    a = ln * LINE_SIZE
                    b = a + LINE_SIZE
                    dur[a:b] = work[a:b]
                    state[ln] = DURABLE
        self._pending_ranges.clear()
        return self._event("fence", 0, 0)

    def persist(self, offset: int, length: int):
        """Convenience: flush then fence one range."""
        self.flush(offset, length)
        self.fence()

    # -- introspection -----------------------------------------------------

    def working_view(self):
        return self._final_work if self.closed else self._work

    def durable_view(self):
        return self._final_dur if self.closed else self._dur

    def durable_bytes(self) -> bytes:
        return bytes(self.durable_view()[:])

    def working_bytes(self) -> bytes:
        return bytes(self.working_view()[:])

    def pending_lines(self):
        return [i for i in range(self.n_lines) if self.line_state[i] == PENDING]

    def close(self):
        if self.closed:
            return
        # retain final images: a machine-level crash sweep may still need
        # this file's content after the mapping is gone
        self._final_work = bytes(self._work[:])
        self._final_dur = bytes(self._dur[:])
        self.closed = True
        if self._trace_log is not None:
            self._trace_log.close()
        for m in (self._work, self._dur):
            try:
                m.flush()
            except (ValueError, OSError):
                pass
            m.close()
        os.close(self._fd)
        os.close(self._dfd)


def open_domain(path, capacity: int, **kw) -> PersistentDomain:
    """Open (creating if absent) an emulated persistence domain."""
    return PersistentDomain(path, capacity, **kw)


def crash_image(domain: PersistentDomain, plan: CrashPlan) -> bytes:
    """Byte content of the medium after losing power per ``plan``.

    Deterministic: the same trace and plan always produce the same image.
    """
    if plan.crash_event > domain.clock.now:
        raise InvalidRange(
            f"crash_event {plan.crash_event} is in the future (now {domain.clock.now})")
    if plan.crash_event >= domain.event_counter:
        # nothing of this domain happened after the cut: use current state
        durable = bytearray(domain.durable_view()[:])
        pending = domain.pending_lines()
        work = domain.working_view()
    else:
        if not domain.record_trace:
            raise InvalidRange("historical crash point requires record_trace=True")
        durable, pending, work = _replay(domain, plan.crash_event)

    if plan.pending_policy == DROP_ALL_UNFENCED:
        return bytes(durable)
    if plan.pending_policy != SUBSET:
        raise InvalidRange(f"unknown pending policy {plan.pending_policy!r}")
    img = bytearray(durable)
    for i, ln in enumerate(pending):
        if plan.subset_mask >> i & 1:
            a = ln * LINE_SIZE
            img[a:a + LINE_SIZE] = work[a:a + LINE_SIZE]
    return bytes(img)


def _replay(domain: PersistentDomain, upto: int):
    """Rebuild (durable image, pending lines, working image) at event ``upto``."""
    if domain._initial_image is None:
        raise InvalidRange("historical crash point requires record_trace=True")
    work = bytearray(domain._initial_image)
    durable = bytearray(domain._initial_image)
    state = bytearray(domain.n_lines)
    pending_ranges = []
    for ev in domain.trace:
        if ev.event_no > upto:
            break
        if ev.kind == "store":
            work[ev.offset:ev.offset + ev.length] = ev.payload
            lo = ev.offset // LINE_SIZE
            hi = (ev.offset + ev.length - 1) // LINE_SIZE + 1
            state[lo:hi] = b"\x01" * (hi - lo)
        elif ev.kind == "flush":
            if ev.length:
                lo = ev.offset // LINE_SIZE
                hi = (ev.offset + ev.length - 1) // LINE_SIZE + 1
                state[lo:hi] = state[lo:hi].translate(_DIRTY_TO_PENDING)
                pending_ranges.append((lo, hi))
        else:  # fence
            for lo, hi in pending_ranges:
                for ln in range(lo, hi):
                    if state[ln] == PENDING:
                        a = ln * LINE_SIZE
                        durable[a:a + LINE_SIZE] = work[a:a + LINE_SIZE]
                        state[ln] = DURABLE
            pending_ranges.clear()
    pending = [ln for ln in range(domain.n_lines) if state[ln] == PENDING]
    return durable, pending, work


def simulate_crash(domain: PersistentDomain, plan: CrashPlan,
                   out_path=None) -> PersistentDomain:
    """Materialize the post-crash medium and open a fresh domain over it.

    With ``out_path=None`` the domain's own files are overwritten (in-place
    power cycle); otherwise a crashed copy is written next to ``out_path``
    and the original is left running.  All volatile state (line states,
    trace, clock position) starts clean in the returned domain.
    """
    img = crash_image(domain, plan)
    dest = Path(out_path) if out_path is not None else domain.path
    if out_path is None:
        domain.close()
    _write_crashed_files(dest, img)
    return PersistentDomain(dest, domain.capacity, record_trace=domain.record_trace)


def _write_crashed_files(dest: Path, img: bytes):
    dest = Path(dest)
    with open(dest, "wb") as f:
        f.write(img)
    with open(str(dest) + ".durable", "wb") as f:
        f.write(img)


class Machine:
    """A directory of domains sharing one event clock — the emulated box.

    Tracks file creation times in event order so a crash sweep can also
    land between "file created" and "registry updated".
    """

    def __init__(self, root, record_trace: bool = False):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.clock = EventClock()
        self.record_trace = record_trace
        self.domains: dict[str, PersistentDomain] = {}
        self.file_births: dict[str, int] = {}

    def open_domain(self, name: str, capacity: int, *, record_trace=None,
                    readonly=False) -> PersistentDomain:
        cached = self.domains.get(name)
        if cached is not None and not cached.closed:
            if cached.capacity != capacity:
                raise CapacityNotAligned(
                    f"{name} already open with capacity {cached.capacity}")
            return cached
        path = self.root / name
        fresh = not path.exists()
        if record_trace is None:
            record_trace = self.record_trace
        dom = PersistentDomain(path, capacity, clock=self.clock,
                               record_trace=record_trace, readonly=readonly)
        if fresh:
            # file creation is itself a crash-sweepable machine event
            self.file_births[name] = self.clock.tick()
        self.domains[name] = dom
        return dom

    def forget(self, name: str):
        """Drop a freed file from crash materialization."""
        dom = self.domains.pop(name, None)
        if dom is not None and not dom.closed:
            dom.close()
        self.file_births.pop(name, None)

    @property
    def now(self) -> int:
        return self.clock.now

    def materialize_crash(self, dest_dir, plan: CrashPlan):
        """Write the whole machine's post-crash files into ``dest_dir``."""
        dest_dir = Path(dest_dir)
        dest_dir.mkdir(parents=True, exist_ok=True)
        for name, dom in self.domains.items():
            born = self.file_births.get(name, 0)
            if born > plan.crash_event:
                continue
            img = crash_image(dom, CrashPlan(plan.crash_event,
                                             plan.pending_policy,
                                             plan.subset_mask))
            _write_crashed_files(dest_dir / name, img)

    def close(self):
        for dom in self.domains.values():
            dom.close()
