"""Scripted effectiveness runs: one monitored dentry, one monitored fd table.

Both scripts follow the same arc.  A process opens a file, the guest is
paused, a protected area is allocated by syscall injection, the object is
migrated into it and the area is trapped.  The guest then resumes and
another open has to hit the protected page.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Optional

from kmig.injector import Injector, carrier
from kmig.kernel import (
    DEFAULT_PROTECTED_BASE,
    GuestSpec,
    GuestState,
    Open,
    Read,
    build_guest,
    exec_syscall,
    fd_table,
    offsets,
    spawn_process,
)
from kmig.memory import HYPERVISOR, AccessKind, MemoryImage, Region
from kmig.migration import migrate_dentry, migrate_fdt
from kmig.monitor import AttributionClass, PageMonitor

CASES = ("dentry", "fdt")


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    expected: Any
    observed: Any


@dataclass
class ScenarioOutcome:
    case: str
    checks: list[Check] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    audit: list[dict] = field(default_factory=list)
    facts: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def expect(self, name: str, observed: Any, expected: Any, ok: Optional[bool] = None) -> None:
        self.checks.append(Check(name, observed == expected if ok is None else ok, expected, observed))

    def to_dict(self) -> dict:
        return {
            "case": self.case,
            "passed": self.passed,
            "checks": [c.__dict__ for c in self.checks],
            "facts": self.facts,
            "events": self.events,
            "audit": self.audit,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _guest(spec: GuestSpec) -> tuple[GuestState, MemoryImage]:
    state, image = build_guest(spec)
    if 2 not in state.processes:
        spawn_process(state, image, 2)
    return state, image


def _allocate(state: GuestState, image: MemoryImage, base: int, length: int) -> tuple[Injector, Region]:
    injector = Injector(protected_base=base)
    start = injector.allocate_protected_area(state, image, length, carrier(1, Read(0, 1)))
    return injector, image.regions[start]


def dentry_case(spec: GuestSpec, protected_base: int = DEFAULT_PROTECTED_BASE) -> ScenarioOutcome:
    """Two processes open ``test.txt``; the second open must land in the protected area."""
    out = ScenarioOutcome("dentry")
    state, image = _guest(spec)
    off = offsets(state.profile)

    first = exec_syscall(state, image, 1, Open("test.txt"))
    src = state.dentries["test.txt"]
    out.expect("first open succeeds", first.ok, True)
    out.expect("d_count after first open", image.read_word(HYPERVISOR, src + off.d_count), 1)

    # guest paused from here until the second open
    injector, area = _allocate(state, image, protected_base, 4096)
    report = migrate_dentry(image, state.profile, state, src, area.start)
    dest = report.dest
    monitor = PageMonitor(image, state)
    monitor.monitored.add(dest)
    monitor.register_watch(area.page_range, read=True, write=True)

    second = exec_syscall(state, image, 2, Open("test.txt"))
    hits = [
        e for e in monitor.events
        if e.page in area.page_range and e.attributed.cls is AttributionClass.MONITORED and e.attributed.addr == dest
    ]
    out.expect("second open succeeds", second.ok, True)
    out.expect("events on the protected page for the migrated dentry", len(hits), ">= 1", ok=len(hits) >= 1)
    out.expect("d_count of the migrated copy", image.read_word(HYPERVISOR, dest + off.d_count), 2)
    out.expect("cache now resolves to the copy", state.dentries["test.txt"], dest)
    monitor.detach()

    out.events = [e.to_dict() for e in monitor.events]
    out.audit = injector.audit
    out.facts = {"source": src, "dest": dest, "area": [area.start, area.pages], "report": report.to_dict()}
    return out


def fdt_case(spec: GuestSpec, protected_base: int = DEFAULT_PROTECTED_BASE) -> ScenarioOutcome:
    """Move pid 1's fd table, then a new open must write exactly one protected slot."""
    out = ScenarioOutcome("fdt")
    state, image = _guest(spec)

    first = exec_syscall(state, image, 1, Open("fdt_1.txt"))
    out.expect("fd of the first file", first.value, 3)

    injector, area = _allocate(state, image, protected_base, 4096)
    report = migrate_fdt(image, state.profile, state, 1, area.start)
    out.expect("pointers rewritten for the fd table", len(report.rewritten), 1)
    monitor = PageMonitor(image, state)
    monitor.monitored.add(area.start)
    monitor.register_watch(area.page_range, read=False, write=True)

    second = exec_syscall(state, image, 1, Open("fdt_2.txt"))
    writes = [e for e in monitor.events if e.kind is AccessKind.WRITE and e.page in area.page_range]
    out.expect("fd of the second file", second.value, 4)
    out.expect("write events on the protected page", len(writes), 1)
    if writes:
        out.expect("event offset is the new slot", writes[0].offset, (area.start % 4096) + 8 * 4)
    out.expect("fd table reached through task->files", fd_table(state, image, 1), area.start)
    monitor.detach()

    out.events = [e.to_dict() for e in monitor.events]
    out.audit = injector.audit
    out.facts = {"source": report.source, "dest": report.dest, "report": report.to_dict()}
    return out


def run_case(case: str, spec: GuestSpec, protected_base: int = DEFAULT_PROTECTED_BASE) -> ScenarioOutcome:
    if case == "dentry":
        return dentry_case(spec, protected_base)
    if case == "fdt":
        return fdt_case(spec, protected_base)
    raise ValueError(f"unknown case {case!r}; expected one of {CASES}")
