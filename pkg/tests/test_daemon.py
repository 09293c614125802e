import socket
import struct
import threading
import time

import pytest

from puddlekit import errors, wire
from puddlekit.client import ClientRuntime
from puddlekit.daemon import (
    DEFAULT_BITS,
    GROUP_R,
    OTHER_R,
    OTHER_W,
    OWNER_R,
    OWNER_W,
    Identity,
    LocalTransport,
    PuddleService,
    SocketTransport,
    serve,
)
from puddlekit.harness import EmbeddedRig, RecoveredBox, sweep
from puddlekit.logs import FLAG_BACKWARD, LS_INVALID
from puddlekit.pmem import Machine


@pytest.fixture
def rig(tmp_path):
    r = EmbeddedRig(tmp_path, trust_ids=True)
    yield r
    r.close()


def client_as(rig, uid, gid=0):
    return rig.new_client(Identity(uid, gid))


# -- basic service behavior ---------------------------------------------------


def test_ping_echoes(rig):
    assert rig.runtime.ping("hello")["echo"] == "hello"


def test_capability_covers_heap_plus_header(rig):
    rt = rig.runtime
    cap, _ = rt._request(wire.GET_NEW_PUDDLE, {"heap": 2 * 1024 * 1024})
    assert cap["total"] == 2 * 1024 * 1024 + 4096
    assert cap["base"] > 0
    m = rt.map_puddle(cap["uuid"])
    assert rt.load(m.base, 16) == bytes.fromhex(cap["uuid"])


def test_second_service_on_same_dir_is_locked_out(rig):
    with pytest.raises(errors.LockHeld):
        PuddleService(rig.data_dir, cap_backend="local")


def test_owner_gets_write_other_denied(rig):
    a = client_as(rig, uid=100)
    b = client_as(rig, uid=200)
    cap, _ = a._request(wire.GET_NEW_PUDDLE, {"heap": 4096})
    got, _ = a._request(wire.GET_EXIST_PUDDLE,
                        {"uuid": cap["uuid"], "want_write": True})
    assert not got["read_only"]
    with pytest.raises(errors.PermissionDenied):
        b._request(wire.GET_EXIST_PUDDLE,
                   {"uuid": cap["uuid"], "want_write": False})


def test_group_and_other_read_bits(rig):
    a = client_as(rig, uid=100, gid=7)
    bits = OWNER_R | OWNER_W | GROUP_R | OTHER_R
    cap, _ = a._request(wire.GET_NEW_PUDDLE, {"heap": 4096, "bits": bits})
    same_group = client_as(rig, uid=300, gid=7)
    got, _ = same_group._request(wire.GET_EXIST_PUDDLE,
                                 {"uuid": cap["uuid"], "want_write": False})
    assert got["read_only"]
    stranger = client_as(rig, uid=400, gid=9)
    got2, _ = stranger._request(wire.GET_EXIST_PUDDLE,
                                {"uuid": cap["uuid"], "want_write": False})
    assert got2["read_only"]
    with pytest.raises(errors.PermissionDenied):
        stranger._request(wire.GET_EXIST_PUDDLE,
                          {"uuid": cap["uuid"], "want_write": True})


def test_unknown_uuid(rig):
    with pytest.raises(errors.UnknownUuid):
        rig.runtime._request(wire.GET_EXIST_PUDDLE,
                             {"uuid": "00" * 16, "want_write": False})


def test_reg_log_space_contracts(rig):
    a = client_as(rig, uid=100)
    b = client_as(rig, uid=200)
    cap, _ = a._request(wire.GET_NEW_PUDDLE, {"heap": 4096})
    with pytest.raises(errors.NotOwner):
        b._request(wire.REG_LOG_SPACE, {"uuid": cap["uuid"]})
    a._request(wire.REG_LOG_SPACE, {"uuid": cap["uuid"]})
    with pytest.raises(errors.AlreadyRegistered):
        a._request(wire.REG_LOG_SPACE, {"uuid": cap["uuid"]})
    cap2, _ = a._request(wire.GET_NEW_PUDDLE, {"heap": 4096})
    with pytest.raises(errors.AlreadyRegistered):
        a._request(wire.REG_LOG_SPACE, {"uuid": cap2["uuid"]})


def test_ref_map_registration_idempotent_conflicting(rig):
    rt = rig.runtime
    rt._request(wire.REG_REF_MAP, {"type_id": 42, "slots": [[8, 0]]})
    rt._request(wire.REG_REF_MAP, {"type_id": 42, "slots": [[8, 0]]})
    with pytest.raises(errors.ConflictingMap):
        rt._request(wire.REG_REF_MAP, {"type_id": 42, "slots": [[16, 0]]})


def test_pool_create_open_and_permissions(rig):
    a = client_as(rig, uid=100)
    b = client_as(rig, uid=200)
    pool = a.create_pool("mine")
    with pytest.raises(errors.AlreadyRegistered):
        a.create_pool("mine")
    with pytest.raises(errors.PermissionDenied):
        b.open_pool("mine")
    again = a.open_pool("mine")
    assert again.pool_id == pool.pool_id
    with pytest.raises(errors.UnknownUuid):
        a.open_pool("nope")


def test_free_puddle_and_not_owner(rig):
    a = client_as(rig, uid=100)
    b = client_as(rig, uid=200)
    cap, _ = a._request(wire.GET_NEW_PUDDLE, {"heap": 4096})
    with pytest.raises(errors.NotOwner):
        b._request(wire.FREE_PUDDLE, {"uuid": cap["uuid"]})
    a._request(wire.FREE_PUDDLE, {"uuid": cap["uuid"]})
    assert not (rig.data_dir / f"{cap['uuid']}.pud").exists()
    with pytest.raises(errors.UnknownUuid):
        a._request(wire.GET_EXIST_PUDDLE, {"uuid": cap["uuid"]})


# -- shutdown / recovery lifecycle ---------------------------------------------


def test_clean_shutdown_skips_recovery(tmp_path):
    rig = EmbeddedRig(tmp_path)
    pool = rig.runtime.create_pool("p")
    with rig.runtime.transaction():
        a = pool.malloc(8, "c")
    rig.close()
    svc = PuddleService(rig.data_dir, cap_backend="local")
    assert svc.last_recovery is None
    svc.shutdown()


def test_dirty_shutdown_triggers_rollback(tmp_path):
    rig = EmbeddedRig(tmp_path)
    rt = rig.runtime
    pool = rt.create_pool("p")
    with rt.transaction():
        a = pool.malloc(8, "c")
        pool.set_root(a)
    with rt.transaction():
        rt.tx_add(a, 8)
        rt.store_u64(a, 9)
    rt.tx_begin()
    rt.tx_add(a, 8)
    rt.store_u64(a, 10)
    # client dies here; daemon stops without ever seeing a commit
    rig.close()
    box = RecoveredBox(rig.data_dir)
    assert box.recovery_report is not None
    assert box.recovery_report["replayed"]
    p2 = box.runtime.open_pool("p")
    assert box.runtime.load_u64(p2.get_root()) == 9
    box.close()


def test_orphan_files_collected_after_crash_sweep(tmp_path):
    rig = EmbeddedRig(tmp_path)
    rt = rig.runtime
    k0 = rig.now
    cap, _ = rt._request(wire.GET_NEW_PUDDLE, {"heap": 4096})
    k1 = rig.now

    def validate(box, k):
        svc = box.service
        # every registered puddle has its file
        for h in svc.puddles:
            assert (box.data_dir / f"{h}.pud").exists(), f"lost puddle at {k}"
        # no unregistered puddle files survived startup
        for f in box.data_dir.glob("*.pud"):
            assert f.stem in svc.puddles, f"orphan {f.name} at {k}"

    n = sweep(rig, k0, k1, validate)
    assert n == k1 - k0 + 1
    rig.close()


def test_registry_survives_daemon_crash_at_every_event(tmp_path):
    """Daemon state slot writes: crash anywhere leaves a loadable registry
    that matches the granted capabilities."""
    rig = EmbeddedRig(tmp_path)
    rt = rig.runtime
    granted = []
    ks = [rig.now]
    for i in range(3):
        cap, _ = rt._request(wire.GET_NEW_PUDDLE, {"heap": 4096})
        granted.append(cap["uuid"])
        ks.append(rig.now)

    def validate(box, k):
        # responses returned before the crash must be represented
        for i, h in enumerate(granted):
            if ks[i + 1] <= k:
                assert h in box.service.puddles, f"granted {h} lost at {k}"

    sweep(rig, ks[0], ks[-1], validate)
    rig.close()


# -- permission-scoped recovery -----------------------------------------------


def _raw_log_attack(rig, owner_uid, target_addr, payload=b"EVILEVIL"):
    """A client writes a log entry targeting ``target_addr`` directly."""
    att = client_as(rig, owner_uid)
    log = att.thread_log()
    log.set_sequence_range(0, 2)
    log.head.try_append(target_addr, payload, 1, FLAG_BACKWARD)
    return att


def test_recovery_never_writes_unwritable_puddles(rig):
    victim = client_as(rig, uid=100)
    vcap, _ = victim._request(wire.GET_NEW_PUDDLE, {"heap": 4096})
    vm = victim.map_puddle(vcap["uuid"])
    victim.store(vm.base + vm.header_size, b"SECRETS!")
    victim.persist(vm.base + vm.header_size, 8)

    _raw_log_attack(rig, 200, vm.base + vm.header_size)
    k = rig.now
    box = rig.recover_at(k)
    rep = box.recovery_report
    assert rep["quarantined"], "log towards unwritable puddle must quarantine"
    assert "cannot write" in rep["quarantined"][0]["reason"]
    svc = box.service
    dom = svc.machine.open_domain(f"{vcap['uuid']}.pud", vcap["total"])
    assert dom.load(vcap["total"] - vcap["heap"], 8) == b"SECRETS!"
    box.close(delete=True)


def test_corrupt_log_checksum_is_quarantined_not_applied(rig):
    rt = rig.runtime
    pool = rt.create_pool("p")
    with rt.transaction():
        a = pool.malloc(8, "c")
        pool.set_root(a)
    with rt.transaction():
        rt.tx_add(a, 8)
        rt.store_u64(a, 5)
    rt.tx_begin()
    rt.tx_add(a, 8)
    rt.store_u64(a, 6)
    rt.persist(a, 8)  # undo-logged locations may be durable pre-commit
    # flip one payload byte of the freshly written undo entry on media
    log = rt.thread_log()
    head = log.head
    (entry,) = [e for e in log.entries()]
    pay_off = head.heap_off + entry.offset + 32
    b0 = head.dom.load(pay_off, 1)[0]
    head.dom.store(pay_off, bytes([b0 ^ 1]))
    head.dom.flush(pay_off, 1)
    head.dom.fence()
    k = rig.now
    box = rig.recover_at(k)
    rep = box.recovery_report
    assert any(q["reason"] == "checksum mismatch" for q in rep["quarantined"])
    # the corrupt log was not replayed: the in-flight value 6 is still there
    p2 = box.runtime.open_pool("p")
    assert box.runtime.load_u64(p2.get_root()) == 6
    # and the affected pool is flagged
    assert rep["quarantined"][0]["pools"] == [pool.pool_id]
    # quarantined logs are never exported from
    with pytest.raises(errors.PoolBusy):
        box.runtime.export_pool(p2, box.data_dir / "x.pexp")
    box.close(delete=True)
    rt.tx_abort()


def test_log_to_freed_and_reacquired_puddle_quarantined(rig):
    owner = client_as(rig, uid=100)
    cap, _ = owner._request(wire.GET_NEW_PUDDLE, {"heap": 4096})
    m = owner.map_puddle(cap["uuid"])
    target = m.base + m.header_size
    _raw_log_attack(rig, 100, target)  # owner logs to its own puddle
    owner._request(wire.FREE_PUDDLE, {"uuid": cap["uuid"]})
    # another user acquires the same address range
    other = client_as(rig, uid=200)
    cap2, _ = other._request(wire.GET_NEW_PUDDLE, {"heap": 4096})
    assert cap2["base"] == cap["base"], "address should be reused first-fit"
    om = other.map_puddle(cap2["uuid"])
    other.store(om.base + om.header_size, b"FRESHDAT")
    other.persist(om.base + om.header_size, 8)
    box = rig.recover_at(rig.now)
    rep = box.recovery_report
    assert rep["quarantined"]
    dom = box.service.machine.open_domain(f"{cap2['uuid']}.pud", cap2["total"])
    assert dom.load(cap2["total"] - cap2["heap"], 8) == b"FRESHDAT"
    box.close(delete=True)


def test_quarantine_marks_log_space_entry_invalid(rig):
    wild = rig.runtime.space.base + rig.runtime.space.length - 4096
    att = _raw_log_attack(rig, 200, wild)  # reserved by nobody
    box = rig.recover_at(rig.now)
    rep = box.recovery_report
    assert rep["quarantined"]
    ls_hex = rep["quarantined"][0]["logspace"]
    view = box.service._logspace_view(ls_hex)
    assert all(status == LS_INVALID for _, status in view.entries())
    box.close(delete=True)


# -- socket transport ------------------------------------------------------------


@pytest.fixture
def sock_daemon(tmp_path):
    sock_path = tmp_path / "puddled.sock"
    stop, ready = threading.Event(), threading.Event()
    t = threading.Thread(target=serve, args=(sock_path, tmp_path / "data"),
                         kwargs=dict(trust_ids=True, cap_backend="fd",
                                     ready_event=ready, stop_event=stop),
                         daemon=True)
    t.start()
    assert ready.wait(10)
    yield sock_path
    stop.set()
    t.join(10)


def test_socket_ping_and_fd_capability_roundtrip(sock_daemon):
    rt = ClientRuntime(SocketTransport(sock_daemon))
    assert rt.ping("yo")["echo"] == "yo"
    pool = rt.create_pool("sockpool")
    with rt.transaction():
        a = pool.malloc(16, "cell")
        rt.store_u64(a, 4242)
        pool.set_root(a)
    assert rt.load_u64(pool.get_root()) == 4242

    rt2 = ClientRuntime(SocketTransport(sock_daemon))
    p2 = rt2.open_pool("sockpool")
    assert rt2.load_u64(p2.get_root()) == 4242
    rt.close()
    rt2.close()


def test_socket_request_ids_answered_in_order(sock_daemon):
    s = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    s.connect(str(sock_daemon))
    n = 500
    for i in range(1, n + 1):
        wire.send_frame(s, wire.PING, i, {"echo": i})
        code, rid, payload, _ = wire.recv_frame(s)
        assert code == wire.OK and rid == i and payload["echo"] == i
    s.close()


def test_malformed_frame_closes_with_protocol_error(sock_daemon):
    s = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    s.connect(str(sock_daemon))
    s.sendall(struct.pack("<IHQ", 5, 99, 1) + b"notjs")
    code, rid, payload, _ = wire.recv_frame(s)
    assert code == wire.ERR
    s.close()


def test_socket_read_only_capability_write_faults(sock_daemon):
    a = ClientRuntime(SocketTransport(sock_daemon))
    a.declare_identity(100, 1)
    bits = OWNER_R | OWNER_W | OTHER_R
    cap, fds = a._request(wire.GET_NEW_PUDDLE, {"heap": 4096, "bits": bits})
    m = a.map_puddle(cap["uuid"])
    a.store(m.base + m.header_size, b"DATA....")
    a.persist(m.base + m.header_size, 8)

    b = ClientRuntime(SocketTransport(sock_daemon))
    b.declare_identity(200, 2)
    mb = b.map_puddle(cap["uuid"], want_write=False)
    assert mb.read_only
    assert b.load(mb.base + mb.header_size, 8) == b"DATA...."
    with pytest.raises(errors.UnwritableRange):
        b.store(mb.base + mb.header_size, b"X" * 8)
    a.close()
    b.close()


def test_recovery_completes_before_first_client_frame(tmp_path):
    """While recovery runs there is no socket to answer; a poll loop only
    ever reaches the daemon after last_recovery is recorded."""
    rig = EmbeddedRig(tmp_path)
    rt = rig.runtime
    pool = rt.create_pool("p")
    with rt.transaction():
        a = pool.malloc(8, "c")
        pool.set_root(a)
    rt.tx_begin()
    rt.tx_add(a, 8)
    rt.store_u64(a, 1)
    crash_dir = rig.crash_dir(rig.now)
    rig.close()

    sock_path = tmp_path / "late.sock"
    stop, ready = threading.Event(), threading.Event()
    t = threading.Thread(target=serve, args=(sock_path, crash_dir),
                         kwargs=dict(cap_backend="fd", ready_event=ready,
                                     stop_event=stop, recovery_delay=1.0),
                         daemon=True)
    t.start()
    t0 = time.monotonic()
    refused_during_recovery = False
    while time.monotonic() - t0 < 15:
        try:
            probe = ClientRuntime(SocketTransport(sock_path))
            break
        except errors.DaemonUnreachable:
            refused_during_recovery = True
            time.sleep(0.05)
    else:
        pytest.fail("daemon never came up")
    assert refused_during_recovery, "socket must not exist during recovery"
    status = probe.status()
    assert status["last_recovery"] is not None
    assert status["last_recovery"]["replayed"]
    probe.close()
    stop.set()
    t.join(10)
