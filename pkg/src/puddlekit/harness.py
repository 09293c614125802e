"""Embedded crash-injection rig shared by the test suite and puddlectl.

Runs daemon and client in one process over a traced machine so a single
event clock orders every persistence event across all files; any event
index can then be materialized as a post-power-loss directory and recovered
by a fresh daemon instance.
"""

import shutil
from pathlib import Path

from .client import ClientRuntime
from .daemon import Identity, LocalTransport, PuddleService
from .pmem import CrashPlan, Machine, crash_image


class EmbeddedRig:
    """One emulated box: shared-clock machine + in-process daemon + client."""

    def __init__(self, root, *, record_trace: bool = True, trust_ids: bool = False,
                 identity: Identity = None, mediation: str = "auto",
                 state_capacity: int = None, **client_kw):
        self.root = Path(root)
        self.data_dir = self.root / "data"
        self.machine = Machine(self.data_dir, record_trace=record_trace)
        svc_kw = {} if state_capacity is None else {"state_capacity": state_capacity}
        self.service = PuddleService(self.data_dir, machine=self.machine,
                                     trust_ids=trust_ids, cap_backend="local",
                                     **svc_kw)
        self.runtime = ClientRuntime(LocalTransport(self.service, identity),
                                     machine=self.machine, mediation=mediation,
                                     **client_kw)
        self._crash_seq = 0

    @property
    def now(self) -> int:
        return self.machine.now

    def new_client(self, identity: Identity = None, **kw) -> ClientRuntime:
        return ClientRuntime(LocalTransport(self.service, identity),
                             machine=self.machine, **kw)

    def crash_dir(self, crash_event: int, policy: str = "drop-all-unfenced",
                  subset_mask: int = 0) -> Path:
        """Materialize the machine's post-crash files into a fresh directory."""
        self._crash_seq += 1
        dest = self.root / f"crash-{self._crash_seq:05d}"
        self.machine.materialize_crash(
            dest, CrashPlan(crash_event, policy, subset_mask))
        return dest

    def recover_at(self, crash_event: int, **kw) -> "RecoveredBox":
        return RecoveredBox(self.crash_dir(crash_event, **kw))

    def close(self):
        self.service.shutdown()
        self.machine.close()


class RecoveredBox:
    """A daemon restarted over a crashed copy, plus a fresh client."""

    def __init__(self, data_dir, identity: Identity = None, trust_ids=False):
        self.data_dir = Path(data_dir)
        self.service = PuddleService(self.data_dir, cap_backend="local",
                                     trust_ids=trust_ids)
        self.runtime = ClientRuntime(LocalTransport(self.service, identity),
                                     machine=self.service.machine)

    @property
    def recovery_report(self):
        return self.service.last_recovery

    def close(self, *, delete: bool = False):
        self.service.shutdown()
        self.service.machine.close()
        if delete:
            shutil.rmtree(self.data_dir, ignore_errors=True)


def merged_trace(machine: Machine):
    """All recorded events across the machine's domains, in clock order."""
    out = []
    for name, dom in machine.domains.items():
        for ev in dom.trace:
            out.append((ev.event_no, name, ev.kind, ev.offset, ev.length))
    out.sort()
    return out


def power_cycle(rig: EmbeddedRig, **rig_kw) -> EmbeddedRig:
    """Cut power in place: drop every unfenced line, restart over the same
    directory.  Returns a fresh rig (recovery runs during its startup)."""
    k = rig.machine.now
    images = {}
    for name, dom in rig.machine.domains.items():
        images[name] = crash_image(dom, CrashPlan(k))
    rig.service.abandon()
    rig.machine.close()
    for name, img in images.items():
        path = rig.data_dir / name
        path.write_bytes(img)
        Path(str(path) + ".durable").write_bytes(img)
    return EmbeddedRig(rig.root, record_trace=rig.machine.record_trace, **rig_kw)


def sweep(rig: EmbeddedRig, k0: int, k1: int, validate, *, stride: int = 1):
    """Crash at every event in [k0, k1], recover, validate(box, k).

    ``validate`` gets the recovered box; violations should raise.  Returns
    the number of crash points exercised.
    """
    n = 0
    for k in range(k0, k1 + 1, stride):
        box = RecoveredBox(rig.crash_dir(k))
        try:
            validate(box, k)
            n += 1
        finally:
            box.close(delete=True)
    return n
