"""EPT-analog page monitor: trap registration, event log, attribution, policy."""

from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Union

from kmig.kernel import GuestState
from kmig.memory import PAGE_SHIFT, PAGE_SIZE, AccessKind, MemoryImage
from kmig.profile import ObjectKind

TRACE_RECORD = struct.Struct("<QIHBI")


class AttributionClass(str, Enum):
    MONITORED = "monitored"
    UNMONITORED = "unmonitored"
    PROTECTED_BOOKKEEPING = "protected-area-bookkeeping"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class Attribution:
    cls: AttributionClass
    kind: Optional[ObjectKind] = None
    addr: Optional[int] = None

    def to_dict(self) -> dict:
        return {"class": self.cls.value, "kind": self.kind.value if self.kind else None, "addr": self.addr}


@dataclass(frozen=True)
class MonitorEvent:
    seq: int
    page: int
    offset: int
    kind: AccessKind
    pid: int
    attributed: Attribution

    @property
    def addr(self) -> int:
        return self.page * PAGE_SIZE + self.offset

    @property
    def is_false_trigger(self) -> bool:
        return self.attributed.cls is not AttributionClass.MONITORED

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "page": self.page,
            "offset": self.offset,
            "kind": self.kind.name.lower(),
            "pid": self.pid,
            "attributed": self.attributed.to_dict(),
        }


class Action(str, Enum):
    LOG = "log"
    ALERT = "alert"


@dataclass
class Policy:
    """Action per (access kind, attribution class); must cover every pair."""

    actions: dict[tuple[AccessKind, AttributionClass], Action]

    def __post_init__(self) -> None:
        missing = [(k, c) for k in AccessKind for c in AttributionClass if (k, c) not in self.actions]
        if missing:
            raise ValueError(f"policy is not total; missing {missing}")

    @classmethod
    def default(cls) -> "Policy":
        actions = {(k, c): Action.LOG for k in AccessKind for c in AttributionClass}
        actions[(AccessKind.WRITE, AttributionClass.MONITORED)] = Action.ALERT
        return cls(actions)

    def action(self, event: MonitorEvent) -> Action:
        return self.actions[(event.kind, event.attributed.cls)]


def attribute_event(
    addr: int,
    state: Optional[GuestState],
    image: Optional[MemoryImage],
    monitored: Union[set[int], frozenset[int]] = frozenset(),
) -> Attribution:
    """Map a trapped address to the object it landed on."""
    if state is not None:
        hit = state.object_at(addr)
        if hit is not None:
            kind, base = hit
            cls = AttributionClass.MONITORED if base in monitored else AttributionClass.UNMONITORED
            return Attribution(cls, kind, base)
    if image is not None:
        region = image.region_at(addr)
        if region is not None and region.tag == "mmap":
            return Attribution(AttributionClass.PROTECTED_BOOKKEEPING, None, region.start)
    return Attribution(AttributionClass.UNKNOWN)


class PageMonitor:
    """Receives trap callbacks from one image and keeps the event log.

    ``monitored`` holds the base addresses of the objects the monitor is
    really interested in; trapped accesses landing anywhere else count as
    false triggers.
    """

    def __init__(
        self,
        image: MemoryImage,
        state: Optional[GuestState] = None,
        policy: Optional[Policy] = None,
    ) -> None:
        self.image = image
        self.state = state
        self.policy = policy or Policy.default()
        self.monitored: set[int] = set()
        self.events: list[MonitorEvent] = []
        self.alerts: list[MonitorEvent] = []
        self._seq = 0
        image.trap_handler = self._on_trap

    def detach(self) -> None:
        if self.image.trap_handler == self._on_trap:
            self.image.trap_handler = None

    def _on_trap(self, page: int, offset: int, kind: AccessKind, pid: int) -> None:
        addr = (page << PAGE_SHIFT) + offset
        event = MonitorEvent(
            self._seq, page, offset, kind, pid, attribute_event(addr, self.state, self.image, self.monitored)
        )
        self._seq += 1
        self.events.append(event)
        if self.policy.action(event) is Action.ALERT:
            self.alerts.append(event)

    # -- watches ----------------------------------------------------------------

    def register_watch(self, pages: Iterable[int], read: bool = True, write: bool = True) -> None:
        for page in pages:
            if read:
                self.image.set_flags(page, read=True)
            if write:
                self.image.set_flags(page, write=True)

    def unregister_watch(self, pages: Iterable[int]) -> None:
        for page in pages:
            self.image.set_flags(page, read=False, write=False)

    def watch_objects(self, objects: Iterable[tuple[int, int]], read: bool = True, write: bool = True) -> set[int]:
        """Monitor (addr, size) objects by trapping every page they touch."""
        pages = set()
        for addr, size in objects:
            self.monitored.add(addr)
            pages.update(range(addr >> PAGE_SHIFT, ((addr + size - 1) >> PAGE_SHIFT) + 1))
        self.register_watch(sorted(pages), read, write)
        return pages

    # -- counters -----------------------------------------------------------------

    def event_counts(self) -> dict:
        by_kind = Counter(e.kind.name.lower() for e in self.events)
        by_cls = Counter(e.attributed.cls.value for e in self.events)
        by_page = Counter(e.page for e in self.events)
        return {
            "total": len(self.events),
            "by_kind": {k: by_kind.get(k, 0) for k in ("read", "write")},
            "by_attribution": {c.value: by_cls.get(c.value, 0) for c in AttributionClass},
            "by_page": dict(sorted(by_page.items())),
        }

    @property
    def false_triggers(self) -> int:
        return sum(1 for e in self.events if e.is_false_trigger)

    def reset(self) -> None:
        self.events.clear()
        self.alerts.clear()

    # -- export ---------------------------------------------------------------------

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict()) + "\n" for e in self.events)

    def to_binary(self) -> bytes:
        return b"".join(
            TRACE_RECORD.pack(e.seq, e.page, e.offset, int(e.kind), e.pid) for e in self.events
        )

    def export(self, path: Union[str, Path], binary: bool = False) -> None:
        path = Path(path)
        if binary:
            path.write_bytes(self.to_binary())
        else:
            path.write_text(self.to_jsonl())


def read_binary_trace(blob: bytes) -> list[tuple[int, int, int, int, int]]:
    """Decode (seq, page, offset, kind, pid) records written by :meth:`PageMonitor.to_binary`."""
    if len(blob) % TRACE_RECORD.size:
        raise ValueError("truncated binary trace")
    return list(TRACE_RECORD.iter_unpack(blob))
