"""Simulated hypervisor-side monitoring of migrated guest kernel objects.

The pieces fit together like this: :mod:`kmig.memory` is the paged guest
memory with trap flags, :mod:`kmig.kernel` builds a tiny file-system
kernel inside it, :mod:`kmig.injector` borrows guest syscalls to allocate
memory, :mod:`kmig.migration` moves objects and fixes every pointer to
them, :mod:`kmig.monitor` receives the traps and :mod:`kmig.bench` runs
the in-place vs migrated comparison.
"""

from kmig.bench import ScenarioSpec, WorkloadSpec, oracle_count, run_cell, sweep
from kmig.errors import KmigError
from kmig.injector import Injector, Phase, carrier
from kmig.kernel import (
    Close,
    GuestSpec,
    GuestState,
    Mmap,
    Munmap,
    Open,
    Read,
    Write,
    build_guest,
    exec_syscall,
    plant_decoy,
    reclaim_lru,
)
from kmig.memory import HYPERVISOR, PAGE_SIZE, AccessContext, AccessKind, MemoryImage
from kmig.migration import dry_run_validate, migrate_batch, migrate_dentry, migrate_fdt, scan_pointers
from kmig.monitor import PageMonitor, Policy
from kmig.profile import LayoutProfile, ObjectKind, default_profile

__version__ = "0.1.0"

__all__ = [
    "HYPERVISOR",
    "PAGE_SIZE",
    "AccessContext",
    "AccessKind",
    "Close",
    "GuestSpec",
    "GuestState",
    "Injector",
    "KmigError",
    "LayoutProfile",
    "MemoryImage",
    "Mmap",
    "Munmap",
    "ObjectKind",
    "Open",
    "PageMonitor",
    "Phase",
    "Policy",
    "Read",
    "ScenarioSpec",
    "WorkloadSpec",
    "Write",
    "build_guest",
    "carrier",
    "default_profile",
    "dry_run_validate",
    "exec_syscall",
    "migrate_batch",
    "migrate_dentry",
    "migrate_fdt",
    "oracle_count",
    "plant_decoy",
    "reclaim_lru",
    "run_cell",
    "scan_pointers",
    "sweep",
]
