"""Failure-atomic transactions over the recovery-log contract.

Hybrid undo/redo commit runs in three stages, all client-side:

1. flush and fence every undo-logged location, then atomically switch the
   log's sequence range from the undo stage (0,2) to the redo stage (2,4);
2. copy redo payloads to their targets, flush, fence, then switch to (4,4)
   which invalidates the log;
3. rewind the log cursor for reuse by the thread's next transaction.

Undo entries carry seq 1 (backward order), redo entries seq 3 (forward),
so after a crash the daemon infers the active stage purely from the range:
(0,2) rolls back, (2,4) rolls forward, (4,4) needs nothing.

Nested transactions flatten into the outermost; commit only takes effect
at depth zero.  Contexts are thread-confined and rely on the caller for
concurrency control, but may freely span puddles and pools.
"""

from .errors import BadTarget, LogFull, NotInTransaction, UnwritableRange
from .logs import FLAG_BACKWARD, FLAG_VOLATILE, LOG_HDR_SIZE, Log

IDLE = "idle"
ACTIVE = "active"
COMMIT_STAGE1 = "committing-stage1"
COMMIT_STAGE2 = "committing-stage2"
COMMITTED = "committed"

SEQ_UNDO = 1
SEQ_REDO = 3
RANGE_UNDO = (0, 2)
RANGE_REDO = (2, 4)
RANGE_NONE = (4, 4)


class TransactionContext:
    """One thread's flattened transaction."""

    def __init__(self, runtime, log: Log):
        self.runtime = runtime
        self.log = log
        self.state = ACTIVE
        self.depth = 1
        self.armed = False
        self.undo_targets = []    # persistent (addr, len) pairs
        self.redo_targets = []    # (addr, payload)
        self.extra_flush = []     # ranges made durable at stage 1 (fresh objects)
        self.touched_heaps = set()
        self.paranoid = runtime.paranoid
        self._stores_seen = []    # paranoid mode: raw stores inside this tx

    # -- log plumbing -------------------------------------------------------

    def _arm(self):
        if self.armed:
            return
        if self.log.dirty():
            # stale entries from the previous tx: disarm them before reuse
            self.log.set_sequence_range(*RANGE_NONE)
            self.log.reset_all()
        self.log.set_sequence_range(*RANGE_UNDO)
        self.armed = True

    def _append(self, target, payload, seq, flags):
        while True:
            try:
                return self.log.append_entry(target, payload, seq, flags)
            except LogFull:
                self.runtime._chain_log(self.log, len(payload))

    # -- operations -----------------------------------------------------------

    def add(self, addr: int, length: int):
        """Undo-log ``length`` bytes at ``addr`` before the caller mutates them."""
        if self.state != ACTIVE:
            raise NotInTransaction(f"tx state is {self.state}")
        if length <= 0:
            raise BadTarget("undo range must be non-empty")
        rt = self.runtime
        flags = FLAG_BACKWARD
        if rt.is_volatile(addr):
            flags |= FLAG_VOLATILE
            snapshot = rt.load(addr, length)
        else:
            if not rt.is_writable(addr, length):
                raise UnwritableRange(f"0x{addr:x}+{length} is not writable")
            snapshot = rt.load(addr, length)
            self.undo_targets.append((addr, length))
        if self.paranoid:
            for s_addr, s_len in self._stores_seen:
                if s_addr < addr + length and addr < s_addr + s_len:
                    raise BadTarget(
                        f"0x{addr:x} modified before tx_add in the same tx")
        self._arm()
        self._append(addr, bytes(snapshot), SEQ_UNDO, flags)

    def redo_set(self, addr: int, payload: bytes):
        """Redo-log new bytes; live memory stays untouched until commit."""
        if self.state != ACTIVE:
            raise NotInTransaction(f"tx state is {self.state}")
        if not payload:
            raise BadTarget("redo payload must be non-empty")
        if self.runtime.is_volatile(addr):
            raise BadTarget("redo targets must be persistent")
        if not self.runtime.is_writable(addr, len(payload)):
            raise UnwritableRange(f"0x{addr:x}+{len(payload)} is not writable")
        self._arm()
        self._append(addr, bytes(payload), SEQ_REDO, 0)
        self.redo_targets.append((addr, bytes(payload)))

    def note_store(self, addr, length):
        if self.paranoid:
            self._stores_seen.append((addr, length))

    def commit(self):
        if self.state != ACTIVE:
            raise NotInTransaction(f"tx state is {self.state}")
        if self.depth > 1:
            self.depth -= 1
            return
        rt = self.runtime
        if not self.armed:
            self.state = COMMITTED
            rt._tx_finished(self)
            return
        # stage 1: every undo-logged location durable, then enter redo stage
        self.state = COMMIT_STAGE1
        doms = set()
        for addr, length in self.undo_targets:
            doms.add(rt.flush(addr, length))
        for addr, length in self.extra_flush:
            doms.add(rt.flush(addr, length))
        for dom in doms:
            dom.fence()
        self.log.set_sequence_range(*RANGE_REDO)
        # stage 2: apply redo entries forward
        self.state = COMMIT_STAGE2
        doms = set()
        for addr, payload in self.redo_targets:
            rt.store(addr, payload, _tx_note=False)
            doms.add(rt.flush(addr, len(payload)))
        for dom in doms:
            dom.fence()
        self.log.set_sequence_range(*RANGE_NONE)
        # stage 3 done; rewind for reuse
        self.log.reset_all()
        self.state = COMMITTED
        rt._tx_finished(self)

    def abort(self):
        """Apply undo entries in reverse in-process and drop the log."""
        if self.state != ACTIVE:
            raise NotInTransaction(f"tx state is {self.state}")
        rt = self.runtime
        if self.armed:
            doms = set()

            def write(addr, data):
                rt.store(addr, data, _tx_note=False)

            def persist(addr, n):
                if not rt.is_volatile(addr):
                    doms.add(rt.flush(addr, n))

            self.log.replay(write, persist, skip_volatile=False)
            for dom in doms:
                dom.fence()
            self.log.set_sequence_range(*RANGE_NONE)
            self.log.reset_all()
        for heap in self.touched_heaps:
            heap._derive()  # volatile allocator state diverged from media
        self.state = IDLE
        self.depth = 0
        rt._tx_finished(self)


class TxHooks:
    """Adapter handed to the allocator so its metadata edits join the tx."""

    __slots__ = ("runtime", "ctx")

    def __init__(self, runtime, ctx):
        self.runtime = runtime
        self.ctx = ctx

    def tx_add(self, addr, n):
        self.ctx.add(addr, n)

    def add_flush(self, addr, n):
        self.ctx.extra_flush.append((addr, n))

    def store(self, addr, data):
        self.runtime.store(addr, data)

    def load(self, addr, n):
        return self.runtime.load(addr, n)
