import random

import pytest

from puddlekit import errors
from puddlekit.core import (
    PAGE,
    GlobalSpace,
    PuddleId,
    create_puddle,
    header_size_for_heap,
    read_header,
    root_address,
    set_assigned_base,
)
from puddlekit.pmem import Machine

MIB = 1024 * 1024


@pytest.fixture
def machine(tmp_path):
    m = Machine(tmp_path / "data")
    yield m
    m.close()


def test_header_ratio():
    assert header_size_for_heap(2 * MIB) == 4096
    assert header_size_for_heap(4 * MIB) == 8192
    assert header_size_for_heap(PAGE) == 4096
    assert header_size_for_heap(3 * MIB) == 8192


def test_create_puddle_layout(machine):
    pid, hdr, dom = create_puddle(machine, 2 * MIB)
    assert hdr.header_size == 4096
    assert hdr.heap_size == 2 * MIB
    assert hdr.total_size == 2 * MIB + 4096
    # heap zeroed
    assert dom.load(4096, 64) == b"\x00" * 64
    # header round-trips from media
    back = read_header(dom)
    assert back.uuid == pid
    assert back.total_size == hdr.total_size
    assert back.assigned_base == 0


def test_create_puddle_bad_size(machine):
    with pytest.raises(errors.BadSize):
        create_puddle(machine, 1000)
    with pytest.raises(errors.BadSize):
        create_puddle(machine, 0)


def test_puddle_file_name(machine):
    pid, _, _ = create_puddle(machine, PAGE)
    assert (machine.root / f"{pid.hex}.pud").exists()


def test_assign_honors_free_hint():
    space = GlobalSpace(length=1024 * PAGE)
    pid = PuddleId.new()
    hint = space.base + 17 * PAGE
    assert space.assign_address(pid, 4 * PAGE, hint=hint) == hint


def test_assign_occupied_hint_falls_back_to_first_fit():
    space = GlobalSpace(length=1024 * PAGE)
    a, b = PuddleId.new(), PuddleId.new()
    hint = space.base
    space.assign_address(a, 8 * PAGE, hint=hint)
    got = space.assign_address(b, 4 * PAGE, hint=hint)
    assert got != hint
    # first-fit oracle: lowest page run of 4 free pages
    assert got == space.base + 8 * PAGE


def test_double_assign_rejected():
    space = GlobalSpace(length=64 * PAGE)
    pid = PuddleId.new()
    space.assign_address(pid, PAGE)
    with pytest.raises(errors.AlreadyAssigned):
        space.assign_address(pid, PAGE)


def test_space_exhausted():
    space = GlobalSpace(length=4 * PAGE)
    space.assign_address(PuddleId.new(), 3 * PAGE)
    with pytest.raises(errors.SpaceExhausted):
        space.assign_address(PuddleId.new(), 2 * PAGE)


def _first_fit_oracle(reserved, n_pages, want):
    """Lowest start such that [start, start+want) misses every extent."""
    taken = sorted(reserved)
    start = 0
    for s, n in taken:
        if s - start >= want:
            break
        start = max(start, s + n)
    return start if start + want <= n_pages else None


def test_reservation_exclusivity_random_sequences():
    rng = random.Random(11)
    for _ in range(50):
        space = GlobalSpace(length=256 * PAGE)
        live = {}
        for _ in range(60):
            if live and rng.random() < 0.4:
                pid = rng.choice(list(live))
                space.release_address(pid)
                del live[pid]
            else:
                want = rng.randrange(1, 9)
                pid = PuddleId.new()
                hint = (space.base + rng.randrange(0, 256) * PAGE
                        if rng.random() < 0.5 else None)
                try:
                    got = space.assign_address(pid, want * PAGE, hint=hint)
                except errors.SpaceExhausted:
                    continue
                page = (got - space.base) // PAGE
                if hint is None or got != hint:
                    reserved = [(e.start, e.npages)
                                for q, e in space.extents.items() if q != pid]
                    assert page == _first_fit_oracle(reserved, 256, want)
                live[pid] = (page, want)
            # pairwise disjoint
            spans = sorted((e.start, e.start + e.npages)
                           for e in space.extents.values())
            for (s1, e1), (s2, e2) in zip(spans, spans[1:]):
                assert e1 <= s2


def test_map_requires_assignment(machine):
    space = GlobalSpace()
    pid, hdr, dom = create_puddle(machine, PAGE)
    with pytest.raises(errors.NotAssigned):
        space.map_puddle(pid, dom)


def test_map_and_read_header_uuid(machine):
    space = GlobalSpace()
    pid, hdr, dom = create_puddle(machine, PAGE)
    base = space.assign_address(pid, hdr.total_size)
    set_assigned_base(dom, hdr, base)
    got_base, got_end = space.map_puddle(pid, dom)
    assert got_base == base
    assert got_end - got_base == hdr.total_size
    assert space.load(base, 16) == pid.raw


def test_adjacent_mappings_do_not_overlap(machine):
    space = GlobalSpace()
    out = []
    for _ in range(2):
        pid, hdr, dom = create_puddle(machine, PAGE)
        base = space.assign_address(pid, hdr.total_size)
        out.append(space.map_puddle(pid, dom))
    (b1, e1), (b2, e2) = sorted(out)
    assert e1 <= b2


def test_unmap_then_access_raises_not_mapped(machine):
    space = GlobalSpace()
    pid, hdr, dom = create_puddle(machine, PAGE)
    base = space.assign_address(pid, hdr.total_size)
    space.map_puddle(pid, dom)
    space.unmap_puddle(pid)
    with pytest.raises(errors.NotMapped):
        space.load(base, 8)


def test_fault_handler_resolves_unmapped_reservation(machine):
    space = GlobalSpace()
    pid, hdr, dom = create_puddle(machine, PAGE)
    base = space.assign_address(pid, hdr.total_size)
    calls = []

    def handler(addr):
        calls.append(addr)
        space.map_puddle(pid, dom)

    space.fault_handler = handler
    assert space.load(base, 16) == pid.raw
    assert calls == [base]


def test_wild_address(machine):
    space = GlobalSpace()
    space.fault_handler = lambda addr: None
    with pytest.raises(errors.WildAddress):
        space.load(space.base + 123 * PAGE, 8)


def test_map_unmap_map_byte_identical(machine):
    space = GlobalSpace()
    pid, hdr, dom = create_puddle(machine, PAGE)
    base = space.assign_address(pid, hdr.total_size)
    space.map_puddle(pid, dom)
    heap = base + hdr.header_size
    space.store(heap, b"hello world")
    before = space.load(heap, 64)
    space.unmap_puddle(pid)
    space.map_puddle(pid, dom)
    assert space.load(heap, 64) == before


def test_root_address(machine):
    space = GlobalSpace()
    pid, hdr, dom = create_puddle(machine, 2 * MIB)
    base = space.assign_address(pid, hdr.total_size)
    with pytest.raises(errors.NotMapped):
        root_address(space, pid, hdr)
    space.map_puddle(pid, dom)
    assert root_address(space, pid, hdr) == base + 4096


def test_root_addresses_of_two_puddles_differ_by_size(machine):
    space = GlobalSpace()
    roots = []
    for _ in range(2):
        pid, hdr, dom = create_puddle(machine, 2 * MIB)
        space.assign_address(pid, hdr.total_size)
        space.map_puddle(pid, dom)
        roots.append(root_address(space, pid, hdr))
    assert abs(roots[1] - roots[0]) >= 2 * MIB + 4096
