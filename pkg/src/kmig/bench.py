"""Overhead benchmark: extraction-style workload under three monitoring modes.

* ``off``: no page is trapped (baseline).
* ``in-place``: the pages holding the k monitored dentries are trapped where
  they are, so every other object sharing those pages triggers too.
* ``migrated``: the k dentries are first moved into an injected protected
  area and only that area is trapped.

Time is modeled, not measured: ``modeled_time = t_base + c_event * events``.
The event count for every cell is re-derived offline by ``oracle_count``
from the raw guest access trace.
"""

from __future__ import annotations

import csv
import io
import math
import os
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, Optional, Sequence

from kmig.errors import ConfigError
from kmig.injector import Injector, carrier
from kmig.kernel import (
    DEFAULT_PROTECTED_BASE,
    Close,
    GuestSpec,
    GuestState,
    Open,
    Read,
    Write,
    build_guest,
    exec_syscall,
)
from kmig.memory import PAGE_SIZE, MemoryImage, Region, TraceRecord
from kmig.migration import MigrationReport, bytes_used, migrate_batch
from kmig.monitor import PageMonitor
from kmig.profile import ObjectKind

MODES = ("off", "in-place", "migrated")
SWEEP_KS = (10, 50, 100, 150, 200, 250, 300, 350, 400)
CSV_COLUMNS = ("k", "mode", "repeat", "events_total", "events_false", "modeled_time", "pages_used")


@dataclass
class WorkloadSpec:
    """Metadata churn standing in for unpacking an archive.

    Every existing file is opened, read, written and closed ``ops_per_file``
    times and ``new_files`` fresh files are created and written, all in one
    seeded shuffled order.  ``distribution`` picks the acting process:
    ``uniform`` draws any process, ``owner`` gives each file an owning
    process and lets another one in with probability ``cross_share``.
    """

    ops_per_file: int = 1
    new_files: int = 48
    distribution: str = "uniform"
    cross_share: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.distribution not in ("uniform", "owner"):
            raise ConfigError(f"unknown access distribution {self.distribution!r}")
        if self.ops_per_file < 0 or self.new_files < 0:
            raise ConfigError("workload counts must be non-negative")


@dataclass
class CostModel:
    t_base: float = 1000.0
    c_event: float = 1.0


@dataclass
class ScenarioSpec:
    guest: GuestSpec
    k: int = 0
    mode: str = "off"
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    cost: CostModel = field(default_factory=CostModel)
    protected_base: int = DEFAULT_PROTECTED_BASE
    protected_len: int = 128 * 1024
    watch_read: bool = True
    watch_write: bool = True

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if not 0 <= self.k <= self.guest.num_files:
            raise ConfigError(f"k={self.k} outside 0..{self.guest.num_files}")

    @classmethod
    def from_dict(cls, raw: Mapping) -> "ScenarioSpec":
        try:
            guest = GuestSpec.from_dict(raw)
            workload = WorkloadSpec(**raw.get("workload", {}))
            cost = CostModel(**raw.get("cost", {}))
            extra = {
                key: raw[key]
                for key in ("k", "mode", "protected_base", "protected_len", "watch_read", "watch_write")
                if key in raw
            }
            return cls(guest=guest, workload=workload, cost=cost, **extra)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        out = self.guest.to_dict()
        out.update(
            k=self.k,
            mode=self.mode,
            workload=asdict(self.workload),
            cost=asdict(self.cost),
            protected_base=self.protected_base,
            protected_len=self.protected_len,
            watch_read=self.watch_read,
            watch_write=self.watch_write,
        )
        return out

    def for_repeat(self, repeat: int) -> "ScenarioSpec":
        return replace(
            self,
            guest=replace(self.guest, seed=self.guest.seed + repeat),
            workload=replace(self.workload, seed=self.workload.seed + repeat),
        )


@dataclass(frozen=True)
class BenchRow:
    k: int
    mode: str
    repeat: Optional[int]
    events_total: float
    events_false: float
    modeled_time: float
    protected_pages: int

    def csv_row(self) -> list:
        return [
            self.k,
            self.mode,
            "mean" if self.repeat is None else self.repeat,
            self.events_total,
            self.events_false,
            self.modeled_time,
            self.protected_pages,
        ]


@dataclass(frozen=True)
class CellResult:
    row: BenchRow
    oracle_events: int
    accesses: int
    watched_pages: int


# -- workload -----------------------------------------------------------------------


def workload_plan(state: GuestState, spec: WorkloadSpec) -> list[tuple[str, str, int]]:
    """Seeded (kind, path, pid) list; kind is 'existing' or 'new'."""
    rng = random.Random(spec.seed)
    pids = sorted(state.processes)
    items = [("existing", p) for p in state.paths for _ in range(spec.ops_per_file)]
    items += [("new", f"extract_{i:04d}.dat") for i in range(spec.new_files)]
    rng.shuffle(items)
    plan = []
    for kind, path in items:
        if spec.distribution == "owner":
            owner = pids[sum(path.encode()) % len(pids)]
            pid = rng.choice(pids) if rng.random() < spec.cross_share else owner
        else:
            pid = rng.choice(pids)
        plan.append((kind, path, pid))
    return plan


def run_extract_workload(
    state: GuestState,
    image: MemoryImage,
    spec: ScenarioSpec,
    monitor: Optional[PageMonitor] = None,
    *,
    repeat: int = 0,
    protected_pages: int = 0,
) -> tuple[list[TraceRecord], BenchRow]:
    """Run the seeded workload with tracing on; returns the guest access trace and its row."""
    image.trace = trace = []
    start = len(monitor.events) if monitor else 0
    for kind, path, pid in workload_plan(state, spec.workload):
        fd = exec_syscall(state, image, pid, Open(path)).value
        if kind == "existing":
            exec_syscall(state, image, pid, Read(fd, 4096))
        exec_syscall(state, image, pid, Write(fd, 4096))
        exec_syscall(state, image, pid, Close(fd))
    image.trace = None
    events = monitor.events[start:] if monitor else []
    total = len(events)
    false = sum(1 for e in events if e.is_false_trigger)
    row = BenchRow(
        spec.k,
        spec.mode,
        repeat,
        total,
        false,
        spec.cost.t_base + spec.cost.c_event * total,
        protected_pages,
    )
    return trace, row


def oracle_count(trace: Iterable[TraceRecord], watched_pages: Mapping[int, tuple[bool, bool]]) -> int:
    """Replay a recorded trace offline: one count per (access, watched page) of matching kind."""
    count = 0
    for addr, length, kind, _pid in trace:
        if length <= 0:
            continue
        for page in range(addr // PAGE_SIZE, (addr + length - 1) // PAGE_SIZE + 1):
            flags = watched_pages.get(page)
            if flags is not None and flags[kind]:
                count += 1
    return count


def overhead_report(area: Optional[Region], reports: Sequence[MigrationReport], profile=None) -> dict:
    from kmig.profile import default_profile

    used = bytes_used(reports, profile or default_profile())
    return {
        "pages_used": math.ceil(used / PAGE_SIZE),
        "bytes_used": used,
        "area_pages": area.pages if area else 0,
        "area_bytes": area.pages * PAGE_SIZE if area else 0,
    }


# -- one cell ------------------------------------------------------------------------


def prepare_mode(state: GuestState, image: MemoryImage, spec: ScenarioSpec) -> tuple[PageMonitor, dict]:
    """Set up watches for ``spec.mode``; migrates first when the mode asks for it."""
    monitor = PageMonitor(image, state)
    size = state.profile.size(ObjectKind.DENTRY)
    targets = [state.dentries[p] for p in state.paths[: spec.k]]
    info = {"area": None, "reports": []}
    if spec.mode == "in-place":
        monitor.watch_objects([(a, size) for a in targets], spec.watch_read, spec.watch_write)
    elif spec.mode == "migrated":
        injector = Injector(protected_base=spec.protected_base)
        pid = min(state.processes)
        start = injector.allocate_protected_area(state, image, spec.protected_len, carrier(pid, Read(0, 1)))
        area = image.regions[start]
        reports = migrate_batch(image, state.profile, state, targets, area)
        monitor.monitored.update(r.dest for r in reports)
        monitor.register_watch(area.page_range, spec.watch_read, spec.watch_write)
        info = {"area": area, "reports": reports, "injector": injector}
    return monitor, info


def run_cell(spec: ScenarioSpec, repeat: int = 0) -> CellResult:
    cell = spec.for_repeat(repeat)
    state, image = build_guest(cell.guest)
    monitor, info = prepare_mode(state, image, cell)
    pages = overhead_report(info["area"], info["reports"], state.profile)["pages_used"]
    watched = {p: (f.trap_read, f.trap_write) for p, f in image.trapped_pages().items()}
    trace, row = run_extract_workload(state, image, cell, monitor, repeat=repeat, protected_pages=pages)
    monitor.detach()
    return CellResult(row, oracle_count(trace, watched), len(trace), len(watched))


def _run_cell_args(args: tuple[ScenarioSpec, int]) -> CellResult:
    return run_cell(*args)


@dataclass
class SweepResult:
    rows: list[BenchRow]
    cells: list[CellResult]

    def row(self, k: int, mode: str) -> BenchRow:
        return next(r for r in self.rows if r.k == k and r.mode == mode)

    def oracle_mismatches(self) -> list[CellResult]:
        return [c for c in self.cells if c.oracle_events != c.row.events_total]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for c in self.cells:
            writer.writerow(c.row.csv_row())
        for r in self.rows:
            writer.writerow(r.csv_row())
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "cells": [dict(asdict(c.row), oracle_events=c.oracle_events) for c in self.cells],
        }


def _mean_row(cells: Sequence[CellResult]) -> BenchRow:
    n = len(cells)
    first = cells[0].row
    return BenchRow(
        first.k,
        first.mode,
        None,
        sum(c.row.events_total for c in cells) / n,
        sum(c.row.events_false for c in cells) / n,
        sum(c.row.modeled_time for c in cells) / n,
        max(c.row.protected_pages for c in cells),
    )


def sweep(
    spec: ScenarioSpec,
    ks: Sequence[int] = SWEEP_KS,
    repeats: int = 10,
    workers: Optional[int] = None,
) -> SweepResult:
    """Baseline plus (in-place, migrated) for every k, averaged over repeats.

    Repeat r uses guest seed ``seed + r`` for every k, so monitored sets are
    nested across k within a repeat.
    """
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    jobs = [(replace(spec, k=0, mode="off"), r) for r in range(repeats)]
    for k in ks:
        for mode in ("in-place", "migrated"):
            jobs += [(replace(spec, k=k, mode=mode), r) for r in range(repeats)]
    workers = workers if workers is not None else int(os.environ.get("KMIG_WORKERS", "1"))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            cells = list(pool.map(_run_cell_args, jobs, chunksize=4))
    else:
        cells = [run_cell(*job) for job in jobs]
    rows = [_mean_row(cells[i : i + repeats]) for i in range(0, len(cells), repeats)]
    return SweepResult(rows, cells)


def check_sweep(result: SweepResult) -> list[str]:
    """Ordering and consistency checks over a finished sweep; empty means all hold."""
    problems = [
        f"k={c.row.k} {c.row.mode} repeat {c.row.repeat}: monitor {c.row.events_total} != oracle {c.oracle_events}"
        for c in result.oracle_mismatches()
    ]
    off = [r for r in result.rows if r.mode == "off"]
    if any(r.events_total for r in off):
        problems.append("baseline recorded events")
    ks = sorted({r.k for r in result.rows if r.mode != "off"})
    previous = None
    for k in ks:
        inplace, migrated = result.row(k, "in-place"), result.row(k, "migrated")
        if not migrated.events_total < inplace.events_total:
            problems.append(f"k={k}: migrated {migrated.events_total} not below in-place {inplace.events_total}")
        if previous is not None and inplace.events_total < previous:
            problems.append(f"k={k}: in-place events dropped from {previous} to {inplace.events_total}")
        previous = inplace.events_total
    for c in result.cells:
        if c.row.mode == "migrated" and c.row.events_false:
            problems.append(f"k={c.row.k} repeat {c.row.repeat}: {c.row.events_false} false triggers after migration")
    return problems
