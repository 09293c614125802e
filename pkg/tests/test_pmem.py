import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from puddlekit import errors
from puddlekit.pmem import (
    CLEAN,
    DIRTY,
    DROP_ALL_UNFENCED,
    PENDING,
    SUBSET,
    CrashPlan,
    Machine,
    crash_image,
    open_domain,
    simulate_crash,
)

from oracles import line_crash_oracle, subset_images


def test_fresh_domain_all_clean(tmp_path):
    dom = open_domain(tmp_path / "d", 4096)
    assert dom.n_lines == 64
    assert all(s == CLEAN for s in dom.line_state)
    assert dom.working_bytes() == b"\x00" * 4096
    dom.close()


def test_open_existing_preserves_content(tmp_path):
    path = tmp_path / "d"
    blob = bytes(random.Random(7).randrange(256) for _ in range(2 * 1024 * 1024))
    path.write_bytes(blob)
    dom = open_domain(path, len(blob))
    assert dom.working_bytes() == blob
    # everything already on media counts as durable
    assert dom.durable_bytes() == blob
    dom.close()


def test_unaligned_capacity_rejected(tmp_path):
    with pytest.raises(errors.CapacityNotAligned):
        open_domain(tmp_path / "d", 1000)


def test_store_marks_lines_dirty(tmp_path):
    dom = open_domain(tmp_path / "d", 4096)
    dom.store(0, b"12345678")
    assert dom.line_state[0] == DIRTY
    assert dom.line_state[1] == CLEAN
    dom.store(60, b"12345678")  # spans lines 0-1
    assert dom.line_state[1] == DIRTY
    with pytest.raises(errors.OutOfBounds):
        dom.store(4096, b"x")
    dom.close()


def test_flush_fence_persistence_rule(tmp_path):
    dom = open_domain(tmp_path / "d", 4096)
    dom.store(0, b"AAAAAAAA")
    dom.flush(0, 8)
    dom.fence()
    img = crash_image(dom, CrashPlan(dom.clock.now))
    assert img[:8] == b"AAAAAAAA"
    dom.close()


def test_unfenced_flush_reverts_by_default(tmp_path):
    dom = open_domain(tmp_path / "d", 4096)
    dom.store(0, b"AAAAAAAA")
    dom.flush(0, 8)
    img = crash_image(dom, CrashPlan(dom.clock.now))
    assert img[:8] == b"\x00" * 8
    dom.close()


def test_fence_without_flush_keeps_line_dirty(tmp_path):
    dom = open_domain(tmp_path / "d", 4096)
    dom.store(0, b"AAAAAAAA")
    dom.fence()
    assert dom.line_state[0] == DIRTY
    img = crash_image(dom, CrashPlan(dom.clock.now))
    assert img[:8] == b"\x00" * 8
    dom.close()


def test_store_after_flush_is_not_fenced(tmp_path):
    dom = open_domain(tmp_path / "d", 4096)
    dom.store(0, b"AAAAAAAA")
    dom.flush(0, 8)
    dom.store(0, b"BBBBBBBB")  # re-dirties: earlier write-back is forgotten
    dom.fence()
    img = crash_image(dom, CrashPlan(dom.clock.now))
    assert img[:8] == b"\x00" * 8
    dom.close()


def test_subset_policy_enumerates_pending_lines(tmp_path):
    dom = open_domain(tmp_path / "d", 4096, record_trace=True)
    dom.store(0, b"A" * 8)
    dom.store(64, b"B" * 8)
    dom.flush(0, 72)
    assert dom.pending_lines() == [0, 1]
    k = dom.clock.now

    events = [(e.event_no, e.kind, e.offset, e.length, e.payload) for e in dom.trace]
    expect = subset_images(dom._initial_image, events, k, dom.working_bytes())
    got = [
        crash_image(dom, CrashPlan(k, SUBSET, mask)) for mask in range(4)
    ]
    assert got == expect
    assert len(set(got)) == 4
    dom.close()


def test_crash_image_determinism(tmp_path):
    dom = open_domain(tmp_path / "d", 8192, record_trace=True)
    rng = random.Random(3)
    for _ in range(40):
        op = rng.randrange(3)
        if op == 0:
            off = rng.randrange(0, 8192 - 16)
            dom.store(off, bytes(rng.randrange(256) for _ in range(16)))
        elif op == 1:
            off = rng.randrange(0, 8192 - 64)
            dom.flush(off, 64)
        else:
            dom.fence()
    plan = CrashPlan(rng.randrange(1, dom.clock.now + 1))
    assert crash_image(dom, plan) == crash_image(dom, plan)
    dom.close()


def test_durability_monotonicity(tmp_path):
    dom = open_domain(tmp_path / "d", 4096, record_trace=True)
    dom.store(0, b"AAAAAAAA")
    dom.persist(0, 8)
    k_durable = dom.clock.now
    dom.store(128, b"CCCCCCCC")
    dom.flush(128, 8)
    dom.fence()
    for k in range(k_durable, dom.clock.now + 1):
        assert crash_image(dom, CrashPlan(k))[:8] == b"AAAAAAAA"
    dom.close()


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 5), st.binary(min_size=1, max_size=8)),
                min_size=1, max_size=16),
       st.randoms(use_true_random=False))
def test_matches_line_oracle_on_random_traces(tmp_path_factory, ops, rnd):
    root = tmp_path_factory.mktemp("oracle")
    dom = open_domain(root / "d", 4096, record_trace=True)
    for kind, slot, payload in ops:
        if kind == 0:
            dom.store(slot * 64, payload)
        elif kind == 1:
            dom.flush(slot * 64, 64)
        else:
            dom.fence()
    events = [(e.event_no, e.kind, e.offset, e.length, e.payload) for e in dom.trace]
    for k in range(dom.clock.now + 1):
        expect_durable, expect_pending = line_crash_oracle(
            dom._initial_image, events, k)
        assert crash_image(dom, CrashPlan(k)) == expect_durable, f"crash at {k}"
    # pending set at the final event must agree too
    _, pend = line_crash_oracle(dom._initial_image, events, dom.clock.now)
    assert dom.pending_lines() == pend
    dom.close()


def test_simulate_crash_survives_process_restart(tmp_path):
    path = tmp_path / "d"
    dom = open_domain(path, 4096)
    dom.store(0, b"AAAAAAAA")
    dom.persist(0, 8)
    dom.store(64, b"BBBBBBBB")  # never flushed
    crashed = simulate_crash(dom, CrashPlan(dom.clock.now))
    assert crashed.working_bytes()[:8] == b"AAAAAAAA"
    assert crashed.working_bytes()[64:72] == b"\x00" * 8
    crashed.close()
    # a separate open over the same path sees the same image
    fresh = open_domain(path, 4096)
    assert fresh.working_bytes()[:8] == b"AAAAAAAA"
    assert fresh.working_bytes()[64:72] == b"\x00" * 8
    fresh.close()


def test_reopen_after_kill_keeps_unfenced_stores_revertible(tmp_path):
    path = tmp_path / "d"
    dom = open_domain(path, 4096)
    dom.store(0, b"AAAAAAAA")
    dom.persist(0, 8)
    dom.store(64, b"BBBBBBBB")
    dom.close()  # process death without a power cut: working file keeps B
    dom2 = open_domain(path, 4096)
    assert dom2.working_bytes()[64:72] == b"BBBBBBBB"
    assert dom2.line_state[1] == DIRTY
    img = crash_image(dom2, CrashPlan(dom2.clock.now))
    assert img[64:72] == b"\x00" * 8
    assert img[:8] == b"AAAAAAAA"
    dom2.close()


def test_trace_log_format(tmp_path):
    log = tmp_path / "events.log"
    dom = open_domain(tmp_path / "d", 4096, trace_log=str(log))
    dom.store(0, b"xy")
    dom.flush(0, 2)
    dom.fence()
    dom.close()
    lines = log.read_text().strip().splitlines()
    assert lines == ["1 store 0 2", "2 flush 0 2", "3 fence 0 0"]


def test_machine_shared_clock_and_materialize(tmp_path):
    m = Machine(tmp_path / "m", record_trace=True)
    a = m.open_domain("a.pud", 4096)
    b = m.open_domain("b.pud", 4096)
    a.store(0, b"AAAAAAAA")
    a.persist(0, 8)
    k = m.now
    b.store(0, b"BBBBBBBB")
    b.persist(0, 8)
    assert b.event_counter > a.event_counter
    out = tmp_path / "crashed"
    m.materialize_crash(out, CrashPlan(k))
    assert (out / "a.pud").read_bytes()[:8] == b"AAAAAAAA"
    assert (out / "b.pud").read_bytes()[:8] == b"\x00" * 8
    m.close()


def test_machine_skips_files_born_after_crash(tmp_path):
    m = Machine(tmp_path / "m", record_trace=True)
    a = m.open_domain("a.pud", 4096)
    a.store(0, b"A" * 8)
    a.persist(0, 8)
    k = m.now
    m.open_domain("late.pud", 4096)
    out = tmp_path / "crashed"
    m.materialize_crash(out, CrashPlan(k))
    assert (out / "a.pud").exists()
    assert not (out / "late.pud").exists()
    m.close()
