"""Independent reference models used to check the runtime's behavior.

Each oracle re-derives expected results by a different route than the
implementation under test (per-line scans, explicit simulators, shadow
containers) so agreement is meaningful.
"""

LINE = 64


def line_crash_oracle(initial: bytes, events, crash_event: int):
    """Per-line brute-force model of post-crash content.

    ``events`` is a list of (event_no, kind, offset, length, payload).
    Returns (durable_image, pending_line_indices).  A line's durable value
    advances only when a fence follows a flush of that line with no
    intervening store to it; a line is left pending when its latest
    write-back was flushed but never fenced.
    """
    n_lines = len(initial) // LINE
    durable = bytearray(initial)
    pending = []
    for ln in range(n_lines):
        lo, hi = ln * LINE, (ln + 1) * LINE
        content = bytearray(initial[lo:hi])
        state = "clean"
        flushed_snapshot = None
        for no, kind, off, length, payload in events:
            if no > crash_event:
                break
            if kind == "store":
                s, e = off, off + length
                if s < hi and e > lo:
                    a = max(s, lo)
                    b = min(e, hi)
                    content[a - lo:b - lo] = payload[a - s:b - s]
                    state = "dirty"
                    flushed_snapshot = None
            elif kind == "flush":
                s, e = off, off + length
                if state == "dirty" and s < hi and e > lo:
                    state = "pending"
                    flushed_snapshot = bytes(content)
            elif kind == "fence":
                if state == "pending":
                    durable[lo:hi] = flushed_snapshot
                    state = "durable"
                    flushed_snapshot = None
        if state == "pending":
            pending.append(ln)
    return bytes(durable), pending


def subset_images(initial, events, crash_event, working_at_crash):
    """All legal post-crash images for every subset of pending lines."""
    durable, pending = line_crash_oracle(initial, events, crash_event)
    images = []
    for mask in range(1 << len(pending)):
        img = bytearray(durable)
        for i, ln in enumerate(pending):
            if mask >> i & 1:
                a = ln * LINE
                img[a:a + LINE] = working_at_crash[a:a + LINE]
        images.append(bytes(img))
    return images


class ShadowBuddy:
    """Reference binary-buddy simulator driven by (addr, order) events.

    Maintains explicit split/merge state; free lists must match any
    correct buddy allocator handling the same placements.
    """

    def __init__(self, span: int, min_order_size: int = 256):
        self.span = span
        self.min_size = min_order_size
        self.max_order = 0
        while min_order_size << self.max_order < span:
            self.max_order += 1
        if min_order_size << self.max_order != span:
            raise ValueError("span must be min_size << k")
        # free[o] = set of block offsets of size min_size << o
        self.free = {o: set() for o in range(self.max_order + 1)}
        self.free[self.max_order].add(0)
        self.allocated = {}  # offset -> order

    def _size(self, order):
        return self.min_size << order

    def reserve(self, offset, order):
        """Mark a block allocated, splitting parents as needed."""
        o = order
        while o <= self.max_order:
            base = offset & ~(self._size(o) - 1)
            if base in self.free[o]:
                self.free[o].discard(base)
                while o > order:
                    o -= 1
                    half = base + self._size(o)
                    keep = offset & ~(self._size(o) - 1)
                    other = base if keep == half else half
                    self.free[o].add(other)
                    base = keep
                self.allocated[offset] = order
                return
            o += 1
        raise AssertionError(f"block 0x{offset:x} order {order} not free")

    def release(self, offset):
        order = self.allocated.pop(offset)
        o = order
        base = offset
        while o < self.max_order:
            buddy = base ^ self._size(o)
            if buddy in self.free[o]:
                self.free[o].discard(buddy)
                base = min(base, buddy)
                o += 1
            else:
                break
        self.free[o].add(base)

    def free_lists(self):
        return {o: sorted(s) for o, s in self.free.items() if s}
