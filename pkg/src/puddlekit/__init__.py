"""puddlekit: a desk-scale persistent-memory runtime.

Failure-atomic transactions over an emulated persistence medium,
application-independent crash recovery by a privileged daemon, and
location-independent data via type-driven reference rewriting.
"""

__version__ = "0.1.0"

from .pmem import (  # noqa: F401
    CrashPlan,
    EventClock,
    Machine,
    PersistentDomain,
    crash_image,
    open_domain,
    simulate_crash,
)
