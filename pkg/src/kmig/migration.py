"""Object migration into a protected area with pointer redirection.

``scan_pointers`` brute-forces the image for aligned words whose value lands
inside the source object and classifies each hit:

* INTERNAL: the slot is inside the source itself (``d_name`` -> ``d_iname``),
* LIST_NEIGHBOR: a hash-chain or LRU link of a neighbouring dentry,
* EXTERNAL: every other slot (file, inode, bucket head, parent links).

Only confirmed hits are rewritten.  Everything runs hypervisor-side with the
guest paused, so migration itself never raises a monitor event.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Optional, Sequence

import numpy as np

from kmig.errors import CapacityError, PlacementError
from kmig.kernel import (
    GuestState,
    Open,
    Read,
    Close,
    check_invariants,
    clone_guest,
    lru_add,
    offsets,
    pointer_fields,
)
from kmig.links import Classification, internal_classification, verify_cross_links
from kmig.memory import HYPERVISOR, PAGE_SIZE, MemoryImage, Region
from kmig.profile import LayoutProfile, ObjectKind


class PointerType(IntEnum):
    EXTERNAL = 1
    INTERNAL = 2
    LIST_NEIGHBOR = 3


@dataclass(frozen=True)
class PointerHit:
    slot_addr: int
    value: int
    ptype: PointerType
    classification: Classification
    owner: Optional[tuple[Optional[ObjectKind], int]] = None

    def to_dict(self) -> dict:
        owner = None
        if self.owner is not None:
            kind, addr = self.owner
            owner = {"kind": kind.value if kind else "global", "addr": addr}
        return {
            "slot_addr": self.slot_addr,
            "value": self.value,
            "ptype": self.ptype.name,
            "classification": self.classification.value,
            "owner": owner,
        }


@dataclass
class MigrationReport:
    source: int
    dest: int
    object_kind: ObjectKind
    rewritten: list[PointerHit] = field(default_factory=list)
    skipped_unverified: list[PointerHit] = field(default_factory=list)
    released: bool = False

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "dest": self.dest,
            "object_kind": self.object_kind.value,
            "rewritten": [h.to_dict() for h in self.rewritten],
            "skipped_unverified": [h.to_dict() for h in self.skipped_unverified],
            "released": self.released,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def candidate_slots(image: MemoryImage, lo: int, hi: int) -> list[int]:
    """Addresses of aligned words with value in ``[lo, hi)`` (vectorized)."""
    words = image.words()
    idx = np.flatnonzero((words >= np.uint64(lo)) & (words < np.uint64(hi)))
    return (idx * 8).tolist()


def scan_pointers(
    image: MemoryImage,
    profile: LayoutProfile,
    state: GuestState,
    src: int,
    kind: ObjectKind,
    candidates: Optional[Iterable[int]] = None,
) -> list[PointerHit]:
    """Every aligned slot holding an address inside the object at ``src``.

    ``candidates`` narrows the search to a superset of the matching slots
    (used by batch migration); without it the whole image is scanned.
    """
    size = profile.size(kind)
    if candidates is None:
        slots = candidate_slots(image, src, src + size)
    else:
        slots = sorted(s for s in set(candidates) if src <= image.read_word(HYPERVISOR, s) < src + size)
    hits = []
    for slot in slots:
        value = image.read_word(HYPERVISOR, slot)
        if src <= slot < src + size:
            cls = internal_classification(profile, kind, src, slot, value)
            hits.append(PointerHit(slot, value, PointerType.INTERNAL, cls, (kind, src)))
            continue
        cls, owner = verify_cross_links(image, profile, state, src, slot, kind)
        ptype = PointerType.LIST_NEIGHBOR if cls.is_list_link else PointerType.EXTERNAL
        if cls is Classification.UNVERIFIED and owner is not None and owner[0] is ObjectKind.DENTRY:
            # a stale or forged link word sitting in a neighbour's link field
            link = slot - owner[1]
            off = offsets(profile)
            if link in (off.d_next, off.d_prev, off.d_lru_next, off.d_lru_prev):
                ptype = PointerType.LIST_NEIGHBOR
        hits.append(PointerHit(slot, value, ptype, cls, owner))
    return hits


def _protected_region(image: MemoryImage, dest: int, size: int) -> Region:
    region = image.region_at(dest)
    if region is None or region.tag != "mmap":
        raise PlacementError(f"destination {dest:#x} is not inside a protected region")
    if dest % 8:
        raise PlacementError(f"destination {dest:#x} is not word aligned")
    if dest + size > region.end:
        raise CapacityError(f"{size} bytes at {dest:#x} overflow region ending at {region.end:#x}")
    return region


def _rewrite(image: MemoryImage, hit: PointerHit, src: int, dest: int) -> None:
    image.write_word(HYPERVISOR, hit.slot_addr, dest + (hit.value - src))


def migrate_dentry(
    image: MemoryImage,
    profile: LayoutProfile,
    state: GuestState,
    src: int,
    dest: int,
    *,
    verify: bool = True,
    candidates: Optional[Iterable[int]] = None,
) -> MigrationReport:
    """Move a cached dentry to ``dest`` and park the original on the LRU.

    With ``verify=False`` unverified hits are rewritten as well; this exists
    only so dry runs can demonstrate what a careless scan breaks.
    """
    size = profile.size(ObjectKind.DENTRY)
    path = state.path_of(src)
    if path is None:
        raise ValueError(f"{src:#x} is not a live cached dentry")
    _protected_region(image, dest, size)
    if any(dest < a + profile.size(k) and a < dest + size for a, k in _objects_near(state, dest, size)):
        raise PlacementError(f"destination {dest:#x} overlaps a live object")

    off = offsets(profile)
    hits = scan_pointers(image, profile, state, src, ObjectKind.DENTRY, candidates)
    report = MigrationReport(src, dest, ObjectKind.DENTRY)

    image.write_bytes(HYPERVISOR, dest, image.read_bytes(HYPERVISOR, src, size))
    for hit in hits:
        confirmed = hit.classification.confirmed or not verify
        if hit.ptype is PointerType.INTERNAL:
            if confirmed:
                # rewrite the copy, not the original
                moved = PointerHit(dest + (hit.slot_addr - src), hit.value, hit.ptype, hit.classification, hit.owner)
                _rewrite(image, moved, src, dest)
                report.rewritten.append(hit)
            else:
                report.skipped_unverified.append(hit)
            continue
        if confirmed:
            _rewrite(image, hit, src, dest)
            report.rewritten.append(hit)
        else:
            report.skipped_unverified.append(hit)

    state.dentries[path] = dest
    state.register(dest, ObjectKind.DENTRY)
    state.parked.add(src)

    image.write_word(HYPERVISOR, src + off.d_count, 0)
    lru_add(state, image, src)
    report.released = True
    return report


def migrate_fdt(
    image: MemoryImage, profile: LayoutProfile, state: GuestState, pid: int, dest: int
) -> MigrationReport:
    """Move ``pid``'s fd table to ``dest`` and repoint files->fdt."""
    off = offsets(profile)
    task = state.processes[pid]
    files = image.read_word(HYPERVISOR, task + off.t_files)
    src = image.read_word(HYPERVISOR, files + off.fs_fdt)
    size = profile.size(ObjectKind.FDT)
    _protected_region(image, dest, size)
    if any(dest < a + profile.size(k) and a < dest + size for a, k in _objects_near(state, dest, size)):
        raise PlacementError(f"destination {dest:#x} overlaps a live object")

    hits = scan_pointers(image, profile, state, src, ObjectKind.FDT)
    report = MigrationReport(src, dest, ObjectKind.FDT)
    image.write_bytes(HYPERVISOR, dest, image.read_bytes(HYPERVISOR, src, size))
    for hit in hits:
        if hit.classification.confirmed and hit.ptype is not PointerType.INTERNAL:
            _rewrite(image, hit, src, dest)
            report.rewritten.append(hit)
        else:
            report.skipped_unverified.append(hit)
    image.write_bytes(HYPERVISOR, src, bytes(size))
    state.unregister(src)
    state.register(dest, ObjectKind.FDT)
    report.released = True
    return report


def _objects_near(state: GuestState, dest: int, size: int) -> list[tuple[int, ObjectKind]]:
    out = []
    for addr in (dest, dest + size - 1):
        hit = state.object_at(addr)
        if hit is not None:
            out.append((hit[1], hit[0]))
    return out


def migrate_batch(
    image: MemoryImage,
    profile: LayoutProfile,
    state: GuestState,
    sources: Sequence[int],
    area: Region,
    *,
    verify: bool = True,
) -> list[MigrationReport]:
    """Copy dentries back to back from the start of ``area``.

    The image is scanned once for all sources up front; afterwards only the
    words written by the batch itself are re-checked, which gives the same
    hit sets as a full scan per object.
    """
    size = profile.size(ObjectKind.DENTRY)
    needed = len(sources) * size
    if needed > area.pages * PAGE_SIZE:
        raise CapacityError(f"{len(sources)} dentries need {needed} bytes; area holds {area.pages * PAGE_SIZE}")
    if not sources:
        return []
    pre = _prescan(image, sources, size)
    image.write_log = []
    reports = []
    dirty = np.empty(0, dtype=np.int64)
    seen = 0
    try:
        for i, src in enumerate(sources):
            fresh = image.write_log[seen:]
            seen = len(image.write_log)
            if fresh:
                dirty = np.union1d(
                    dirty,
                    np.concatenate([np.arange(a & ~7, a + n, 8, dtype=np.int64) for a, n in fresh]),
                )
            words = image.words()
            vals = words[dirty >> 3]
            hot = dirty[(vals >= np.uint64(src)) & (vals < np.uint64(src + size))].tolist()
            reports.append(
                migrate_dentry(
                    image, profile, state, src, area.start + i * size,
                    verify=verify, candidates=pre.get(src, set()).union(hot),
                )
            )
    finally:
        image.write_log = None
    return reports


def _prescan(image: MemoryImage, sources: Sequence[int], size: int) -> dict[int, set[int]]:
    order = np.array(sorted(set(sources)), dtype=np.uint64)
    words = image.words()
    lo, hi = int(order[0]), int(order[-1]) + size
    idx = np.flatnonzero((words >= np.uint64(lo)) & (words < np.uint64(hi)))
    vals = words[idx]
    pos = np.searchsorted(order, vals, side="right") - 1
    keep = vals < order[pos] + np.uint64(size)
    out: dict[int, set[int]] = {}
    for slot, owner in zip((idx[keep] * 8).tolist(), order[pos[keep]].tolist()):
        out.setdefault(owner, set()).add(slot)
    return out


def bytes_used(reports: Iterable[MigrationReport], profile: LayoutProfile) -> int:
    return sum(profile.size(r.object_kind) for r in reports)


# -- checks ---------------------------------------------------------------------


def stale_references(
    state: GuestState, image: MemoryImage, sources: Iterable[int], size: int
) -> list[tuple[int, int]]:
    """Live pointer fields that still point into any migrated source.

    Slots owned by LRU-parked objects and the LRU list heads are excluded:
    they are the release path, not live references.
    """
    ranges = [(s, s + size) for s in sources]
    parked = state.parked
    bad = []
    for pf in pointer_fields(state, image):
        if pf.owner in parked or pf.name in ("lru_first", "lru_last"):
            continue
        if pf.name in ("d_lru_next", "d_lru_prev") and pf.value in parked:
            continue
        if any(lo <= pf.value < hi for lo, hi in ranges):
            bad.append((pf.slot, pf.value))
    return bad


@dataclass
class Verdict:
    passed: bool
    diagnostics: list[str] = field(default_factory=list)
    corrupted_slots: list[int] = field(default_factory=list)
    reports: list[MigrationReport] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "diagnostics": self.diagnostics,
            "corrupted_slots": self.corrupted_slots,
            "migrated": len(self.reports),
        }


def dry_run_validate(
    state: GuestState,
    image: MemoryImage,
    sources: Sequence[int],
    area: Region,
    probe_paths: Sequence[str],
    *,
    probe_pid: Optional[int] = None,
    verify: bool = True,
) -> Verdict:
    """Migrate on a clone, drive OPEN/READ/CLOSE probes through injection, check.

    The clone's region table gets ``area`` if the original does not have it
    yet, so the caller can validate before allocating for real.
    """
    from kmig.injector import Injector, carrier

    twin_state, twin = clone_guest(state, image)
    profile = twin_state.profile
    if area.start not in twin.regions:
        twin.allocate_region(area.start, area.length)
    before = twin.clone()
    diagnostics: list[str] = []

    try:
        reports = migrate_batch(twin, profile, twin_state, sources, area, verify=verify)
    except Exception as exc:  # the verdict carries the failure
        return Verdict(False, [f"migration raised {type(exc).__name__}: {exc}"])

    # every changed word must be a real pointer field, the parked original, or the new copy
    allowed = {pf.slot for pf in pointer_fields(twin_state, twin)}
    parked_spans = [(s, s + profile.size(ObjectKind.DENTRY)) for s in twin_state.parked]
    old, new = before.words(), twin.words()
    changed = (np.flatnonzero(old != new) * 8).tolist()
    corrupted = []
    for slot in changed:
        if area.start <= slot < area.end or any(lo <= slot < hi for lo, hi in parked_spans):
            continue
        if slot not in allowed:
            corrupted.append(slot)
            diagnostics.append(f"non-pointer word at {slot:#x} was rewritten")

    pid = probe_pid if probe_pid is not None else min(twin_state.processes)
    injector = Injector()
    for path in probe_paths:
        expect = twin_state.dentries.get(path)
        try:
            injector.arm(twin_state, twin)
            opened = injector.inject(twin_state, twin, Open(path), carrier(pid, Read(0, 1)))
            if not opened.ok:
                diagnostics.append(f"probe OPEN {path!r} failed: errno {opened.errno}")
                continue
            fd = opened.value
            injector.arm(twin_state, twin)
            read = injector.inject(twin_state, twin, Read(fd, 64), carrier(pid, Read(0, 1)))
            if not read.ok:
                diagnostics.append(f"probe READ {path!r} failed: errno {read.errno}")
            if expect is not None and twin_state.dentries.get(path) != expect:
                diagnostics.append(f"probe OPEN {path!r} did not find its cached dentry")
            injector.arm(twin_state, twin)
            injector.inject(twin_state, twin, Close(fd), carrier(pid, Read(0, 1)))
        except Exception as exc:
            diagnostics.append(f"probe {path!r} raised {type(exc).__name__}: {exc}")
            break

    diagnostics += check_invariants(twin_state, twin)
    return Verdict(not diagnostics, diagnostics, corrupted, reports)
