"""Paged, byte-addressable guest physical memory with EPT-style trap flags.

Every access names an :class:`AccessContext`.  Guest-context accesses are
checked against the per-page ``trap_read`` / ``trap_write`` flags and, when
a flag is set, the registered trap handler is called once per touched
trapped page before the access returns.  Hypervisor-context accesses are
never trapped; they model reads and writes made from outside the VM through
an introspection library.

Guest accesses can also be recorded into a flat access trace (address,
length, kind, pid) so that event counts can be re-derived offline.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from kmig.errors import (
    AlignmentError,
    MemoryRangeError,
    RegionNotFoundError,
    RegionOverlapError,
)

PAGE_SIZE = 4096
PAGE_SHIFT = 12
WORD_SIZE = 8
DEFAULT_IMAGE_SIZE = 16 * 1024 * 1024

_WORD = struct.Struct("<Q")


class AccessKind(IntEnum):
    READ = 0
    WRITE = 1


@dataclass(frozen=True)
class AccessContext:
    """Who performs an access: a guest process (``pid``) or the hypervisor."""

    pid: Optional[int] = None

    @classmethod
    def guest(cls, pid: int) -> "AccessContext":
        return cls(pid)

    @property
    def is_guest(self) -> bool:
        return self.pid is not None

    def __repr__(self) -> str:
        return "Hypervisor" if self.pid is None else f"Guest(pid={self.pid})"


HYPERVISOR = AccessContext()


@dataclass(frozen=True)
class PageFlags:
    trap_read: bool = False
    trap_write: bool = False


@dataclass(frozen=True)
class Region:
    """A page-aligned allocation recorded in the region table.

    ``length`` is the byte count the caller asked for; the region always
    covers whole pages.  ``tag`` separates kernel reservations made by the
    guest builder from regions created through MMAP.
    """

    start: int
    length: int
    tag: str = "mmap"

    @property
    def pages(self) -> int:
        return math.ceil(self.length / PAGE_SIZE)

    @property
    def end(self) -> int:
        return self.start + self.pages * PAGE_SIZE

    @property
    def page_range(self) -> range:
        first = self.start >> PAGE_SHIFT
        return range(first, first + self.pages)

    def contains(self, addr: int, length: int = 1) -> bool:
        return self.start <= addr and addr + length <= self.end


# (page, offset, kind, pid) for one trapped (access, page) pair.
TrapHandler = Callable[[int, int, AccessKind, int], None]
# (addr, length, kind, pid) for one guest access.
TraceRecord = tuple[int, int, int, int]


class MemoryImage:
    """Flat simulated physical memory.

    >>> img = MemoryImage(4 * PAGE_SIZE)
    >>> img.write_word(HYPERVISOR, 0x100, 0x2040)
    >>> hex(img.read_word(HYPERVISOR, 0x100))
    '0x2040'
    """

    page_size = PAGE_SIZE

    def __init__(self, size: int = DEFAULT_IMAGE_SIZE) -> None:
        if size <= 0 or size % PAGE_SIZE:
            raise AlignmentError(f"image size {size:#x} is not a positive multiple of {PAGE_SIZE}")
        self.data = bytearray(size)
        self.size = size
        self.num_pages = size // PAGE_SIZE
        self._trap_read = bytearray(self.num_pages)
        self._trap_write = bytearray(self.num_pages)
        self.regions: dict[int, Region] = {}
        self.trap_handler: Optional[TrapHandler] = None
        self.trace: Optional[list[TraceRecord]] = None
        self.write_log: Optional[list[tuple[int, int]]] = None

    # -- raw access ---------------------------------------------------------

    def _check_range(self, addr: int, length: int) -> None:
        if addr < 0 or length < 0 or addr + length > self.size:
            raise MemoryRangeError(
                f"access [{addr:#x}, {addr + length:#x}) outside image of {self.size:#x} bytes"
            )

    def _guest_access(self, addr: int, length: int, kind: AccessKind, pid: int) -> None:
        if self.trace is not None:
            self.trace.append((addr, length, int(kind), pid))
        flags = self._trap_write if kind else self._trap_read
        first = addr >> PAGE_SHIFT
        last = (addr + length - 1) >> PAGE_SHIFT
        handler = self.trap_handler
        for page in range(first, last + 1):
            if flags[page] and handler is not None:
                offset = addr - (page << PAGE_SHIFT) if page == first else 0
                handler(page, offset, kind, pid)

    def read_bytes(self, ctx: AccessContext, addr: int, length: int) -> bytes:
        self._check_range(addr, length)
        if length and ctx.pid is not None:
            self._guest_access(addr, length, AccessKind.READ, ctx.pid)
        return bytes(self.data[addr : addr + length])

    def write_bytes(self, ctx: AccessContext, addr: int, data: bytes) -> None:
        length = len(data)
        self._check_range(addr, length)
        if not length:
            return
        if ctx.pid is not None:
            self._guest_access(addr, length, AccessKind.WRITE, ctx.pid)
        if self.write_log is not None:
            self.write_log.append((addr, length))
        self.data[addr : addr + length] = data

    def read_word(self, ctx: AccessContext, addr: int) -> int:
        if addr % WORD_SIZE:
            raise AlignmentError(f"word access at {addr:#x} is not 8-byte aligned")
        self._check_range(addr, WORD_SIZE)
        if ctx.pid is not None:
            self._guest_access(addr, WORD_SIZE, AccessKind.READ, ctx.pid)
        return _WORD.unpack_from(self.data, addr)[0]

    def write_word(self, ctx: AccessContext, addr: int, value: int) -> None:
        if addr % WORD_SIZE:
            raise AlignmentError(f"word access at {addr:#x} is not 8-byte aligned")
        self._check_range(addr, WORD_SIZE)
        if ctx.pid is not None:
            self._guest_access(addr, WORD_SIZE, AccessKind.WRITE, ctx.pid)
        if self.write_log is not None:
            self.write_log.append((addr, WORD_SIZE))
        _WORD.pack_into(self.data, addr, value)

    def words(self) -> np.ndarray:
        """Little-endian u64 view over the whole image (hypervisor side, no traps)."""
        return np.frombuffer(self.data, dtype="<u8")

    # -- trap flags ---------------------------------------------------------

    def flags(self, page: int) -> PageFlags:
        return PageFlags(bool(self._trap_read[page]), bool(self._trap_write[page]))

    def set_flags(self, page: int, *, read: Optional[bool] = None, write: Optional[bool] = None) -> None:
        if not 0 <= page < self.num_pages:
            raise MemoryRangeError(f"page {page} outside image")
        if read is not None:
            self._trap_read[page] = int(read)
        if write is not None:
            self._trap_write[page] = int(write)

    def trapped_pages(self) -> dict[int, PageFlags]:
        pages = set(np.flatnonzero(np.frombuffer(self._trap_read, np.uint8)).tolist())
        pages |= set(np.flatnonzero(np.frombuffer(self._trap_write, np.uint8)).tolist())
        return {p: self.flags(p) for p in sorted(pages)}

    # -- region table -------------------------------------------------------

    def allocate_region(self, addr: int, length: int, tag: str = "mmap") -> Region:
        if addr % PAGE_SIZE:
            raise AlignmentError(f"region start {addr:#x} is not page aligned")
        if length <= 0:
            raise MemoryRangeError("region length must be positive")
        region = Region(addr, length, tag)
        self._check_range(addr, region.pages * PAGE_SIZE)
        for other in self.regions.values():
            if region.start < other.end and other.start < region.end:
                raise RegionOverlapError(
                    f"[{region.start:#x}, {region.end:#x}) overlaps [{other.start:#x}, {other.end:#x})"
                )
        self.data[region.start : region.end] = bytes(region.end - region.start)
        self.regions[addr] = region
        return region

    def release_region(self, addr: int, length: int) -> Region:
        region = self.regions.get(addr)
        if region is None or region.pages != math.ceil(length / PAGE_SIZE):
            raise RegionNotFoundError(f"no region ({addr:#x}, {length:#x})")
        del self.regions[addr]
        for page in region.page_range:
            self._trap_read[page] = 0
            self._trap_write[page] = 0
        return region

    def region_at(self, addr: int) -> Optional[Region]:
        for region in self.regions.values():
            if region.start <= addr < region.end:
                return region
        return None

    # -- cloning and snapshots ---------------------------------------------

    def clone(self) -> "MemoryImage":
        """Deep copy of bytes, flags and regions.  Handlers and traces are not copied."""
        twin = MemoryImage.__new__(MemoryImage)
        twin.data = bytearray(self.data)
        twin.size = self.size
        twin.num_pages = self.num_pages
        twin._trap_read = bytearray(self._trap_read)
        twin._trap_write = bytearray(self._trap_write)
        twin.regions = dict(self.regions)
        twin.trap_handler = None
        twin.trace = None
        twin.write_log = None
        return twin

    def dump(self, path: str | Path) -> Path:
        """Write raw bytes to ``path`` and a JSON sidecar to ``path + '.json'``."""
        path = Path(path)
        path.write_bytes(self.data)
        sidecar = Path(str(path) + ".json")
        meta = {
            "regions": [
                {"start": r.start, "len": r.length, "tag": r.tag}
                for r in sorted(self.regions.values(), key=lambda r: r.start)
            ],
            "trapped": [
                {"page": p, "read": f.trap_read, "write": f.trap_write}
                for p, f in self.trapped_pages().items()
            ],
        }
        sidecar.write_text(json.dumps(meta, indent=2))
        return sidecar

    @classmethod
    def restore(cls, path: str | Path) -> "MemoryImage":
        path = Path(path)
        raw = path.read_bytes()
        meta = json.loads(Path(str(path) + ".json").read_text())
        image = cls(len(raw))
        image.data[:] = raw
        for r in meta["regions"]:
            image.regions[r["start"]] = Region(r["start"], r["len"], r.get("tag", "mmap"))
        for t in meta["trapped"]:
            image.set_flags(t["page"], read=t["read"], write=t["write"])
        return image


def touched_pages(addr: int, length: int) -> range:
    """Pages covered by ``length`` bytes at ``addr``."""
    if length <= 0:
        return range(0)
    return range(addr >> PAGE_SHIFT, ((addr + length - 1) >> PAGE_SHIFT) + 1)
