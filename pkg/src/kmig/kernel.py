"""Synthetic guest kernel: object graph in a MemoryImage plus a syscall layer.

The builder lays out a small filesystem (dentries, inodes, file objects,
per-process fd tables) at fixed simulator addresses.  ``exec_syscall`` runs
OPEN/READ/WRITE/CLOSE/MMAP/MUNMAP on behalf of a process; every object touch
a syscall makes goes through a guest-context access, so trapped pages see
exactly the accesses a real kernel would make on that layout.

Physical layout (all sizes in bytes)::

    0x001000  kernel text; syscall entry at 0x1000, exit at 0x1040
    0x002000  globals: dentry_cache buckets (64 x 8), LRU first/last,
              root and console dentries/inodes
    0x040000  dentry slab, 2 MiB (128 B objects, 32 per page when interleaved,
              one per page otherwise)
    0x240000  inode slab, 512 KiB (64 B objects)
    0x2c0000  file slab, 512 KiB (64 B objects)
    0x340000  task area: 1 KiB per process (task +0, files +64, fdt +512)
    0x380000  per-process user buffers (256 B each)
    0x390000  unrelated kernel data buffer, 64 KiB
    0x3a0000  end of kernel reservations; the rest is free for MMAP

Touches per syscall (the event-count oracles rely on these being exact):

* OPEN walks the path's hash bucket reading ``d_name`` and the 64-byte name
  of every chain node, creates dentry+inode when absent, reads the fd table,
  increments ``d_count``, reads ``d_inode``, writes a new file object and
  writes the fd slot.
* READ/WRITE resolve task->files->fdt[fd], read ``f_count``, read and write
  ``f_pos``, read ``f_dentry`` and the dentry's ``d_count``, read ``f_inode``
  and the inode's ``i_count``.
* CLOSE clears the fd slot, decrements ``d_count`` and drops the file.
"""

from __future__ import annotations

import bisect
import copy
import errno
import heapq
import random
from dataclasses import dataclass, field
from typing import Any, Optional, Protocol, Union

from kmig.errors import (
    AlignmentError,
    CapacityError,
    ConfigError,
    MemoryRangeError,
    RegionNotFoundError,
    RegionOverlapError,
)
from kmig.memory import (
    DEFAULT_IMAGE_SIZE,
    HYPERVISOR,
    PAGE_SIZE,
    WORD_SIZE,
    AccessContext,
    MemoryImage,
)
from kmig.profile import (
    LayoutProfile,
    ObjectKind,
    default_profile,
    encode_object,
    pack_name,
)

SYSCALL_ENTRY = 0x1000
SYSCALL_EXIT = 0x1040
BUCKETS_ADDR = 0x2000
NUM_BUCKETS = 64
LRU_FIRST = 0x2200
LRU_LAST = 0x2208
ROOT_DENTRY = 0x2400
CONSOLE_DENTRY = 0x2480
ROOT_INODE = 0x2500
CONSOLE_INODE = 0x2540

DENTRY_SLAB = 0x040000
DENTRY_SLAB_LEN = 0x200000
INODE_SLAB = 0x240000
INODE_SLAB_LEN = 0x80000
FILE_SLAB = 0x2C0000
FILE_SLAB_LEN = 0x80000
TASK_AREA = 0x340000
TASK_SLOT = 1024
MAX_PROCESSES = 256
USER_AREA = 0x380000
USER_SLOT = 256
DATA_AREA = 0x390000
DATA_AREA_LEN = 0x10000
KERNEL_END = 0x3A0000

DEFAULT_PROTECTED_BASE = 0x400000

# First bytes of the entry and exit paths (swapgs; sysretq).
ENTRY_CODE = bytes.fromhex("0f01f8654889242510")
EXIT_CODE = bytes.fromhex("480f07")

STDIO_FDS = 3
KERNEL_PID = 0


class Nr:
    """x86-64 syscall numbers for the modeled calls."""

    READ = 0
    WRITE = 1
    OPEN = 2
    CLOSE = 3
    MMAP = 9
    MUNMAP = 11


# -- requests and results ----------------------------------------------------


@dataclass(frozen=True)
class Open:
    path: str


@dataclass(frozen=True)
class Read:
    fd: int
    length: int = 4096


@dataclass(frozen=True)
class Write:
    fd: int
    length: int = 4096


@dataclass(frozen=True)
class Close:
    fd: int


@dataclass(frozen=True)
class Mmap:
    addr: int
    length: int


@dataclass(frozen=True)
class Munmap:
    addr: int
    length: int


SyscallRequest = Union[Open, Read, Write, Close, Mmap, Munmap]


def request_to_dict(req: SyscallRequest) -> dict:
    return {"op": type(req).__name__.upper(), **req.__dict__}


@dataclass(frozen=True)
class SyscallResult:
    """Outcome of one syscall.  ``value`` is an fd, byte count, address or 0."""

    request: SyscallRequest
    value: int = 0
    errno: int = 0

    @property
    def ok(self) -> bool:
        return self.errno == 0

    @classmethod
    def from_ret(cls, request: SyscallRequest, ret: int) -> "SyscallResult":
        if ret < 0:
            return cls(request, 0, -ret)
        return cls(request, ret, 0)

    def to_dict(self) -> dict:
        return {"request": request_to_dict(self.request), "value": self.value, "errno": self.errno}


@dataclass
class Registers:
    """The slice of vCPU state the syscall path uses."""

    ip: int
    sp: int
    nr: int
    args: list[int]
    ret: int = 0


class BreakpointHook(Protocol):
    def at_entry(self, state: "GuestState", image: MemoryImage, pid: int, regs: Registers) -> None: ...

    def at_exit(self, state: "GuestState", image: MemoryImage, pid: int, regs: Registers) -> bool: ...


# -- allocators ---------------------------------------------------------------


@dataclass
class Slab:
    """Fixed-stride object allocator that always hands out the lowest free slot."""

    kind: ObjectKind
    start: int
    length: int
    stride: int
    next_index: int = 0
    free: list[int] = field(default_factory=list)

    @property
    def capacity(self) -> int:
        return self.length // self.stride

    def alloc(self) -> int:
        if self.free:
            index = heapq.heappop(self.free)
        else:
            if self.next_index >= self.capacity:
                raise CapacityError(f"{self.kind.value} slab full ({self.capacity} objects)")
            index = self.next_index
            self.next_index += 1
        return self.start + index * self.stride

    def release(self, addr: int) -> None:
        heapq.heappush(self.free, (addr - self.start) // self.stride)

    def base_of(self, addr: int) -> Optional[int]:
        if self.start <= addr < self.start + self.length:
            return self.start + (addr - self.start) // self.stride * self.stride
        return None


# -- guest state ----------------------------------------------------------------


@dataclass
class GuestSpec:
    num_files: int
    num_processes: int = 1
    interleave: bool = True
    seed: int = 0
    reclaim_period: int = 64
    image_size: int = DEFAULT_IMAGE_SIZE

    def __post_init__(self) -> None:
        if self.num_files < 1:
            raise ConfigError("num_files must be at least 1")
        if not 1 <= self.num_processes <= MAX_PROCESSES:
            raise ConfigError(f"num_processes must be in 1..{MAX_PROCESSES}")
        if self.reclaim_period < 0:
            raise ConfigError("reclaim_period must be >= 0")

    @classmethod
    def from_dict(cls, raw: dict) -> "GuestSpec":
        known = {"num_files", "num_processes", "interleave", "seed", "reclaim_period", "image_size"}
        try:
            return cls(**{k: raw[k] for k in known if k in raw})
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class GuestState:
    """Bookkeeping for the simulated OS.  Object contents live in the image."""

    profile: LayoutProfile
    seed: int = 0
    interleave: bool = True
    reclaim_period: int = 64
    processes: dict[int, int] = field(default_factory=dict)
    dentries: dict[str, int] = field(default_factory=dict)
    inodes: dict[str, int] = field(default_factory=dict)
    special_dentries: dict[str, int] = field(default_factory=dict)
    open_files: set[int] = field(default_factory=set)
    parked: set[int] = field(default_factory=set)
    live: dict[int, ObjectKind] = field(default_factory=dict)
    paths: list[str] = field(default_factory=list)
    slabs: dict[ObjectKind, Slab] = field(default_factory=dict)
    next_ino: int = 2
    syscall_count: int = 0
    syscall_entry_addr: int = SYSCALL_ENTRY
    syscall_exit_addr: int = SYSCALL_EXIT
    buckets_addr: int = BUCKETS_ADDR
    lru_head: int = LRU_FIRST
    decoys: list[int] = field(default_factory=list)
    breakpoint_hook: Optional[Any] = field(default=None, compare=False, repr=False)
    _extra: list[int] = field(default_factory=list, compare=False, repr=False)

    # -- registry ------------------------------------------------------------

    def _in_arith_area(self, addr: int) -> bool:
        return any(s.base_of(addr) is not None for s in self.slabs.values()) or (
            TASK_AREA <= addr < TASK_AREA + TASK_SLOT * MAX_PROCESSES
        )

    def register(self, addr: int, kind: ObjectKind) -> None:
        self.live[addr] = kind
        if not self._in_arith_area(addr):
            i = bisect.bisect_left(self._extra, addr)
            if i == len(self._extra) or self._extra[i] != addr:
                self._extra.insert(i, addr)

    def unregister(self, addr: int) -> None:
        self.live.pop(addr, None)
        i = bisect.bisect_left(self._extra, addr)
        if i < len(self._extra) and self._extra[i] == addr:
            del self._extra[i]

    def object_at(self, addr: int) -> Optional[tuple[ObjectKind, int]]:
        """The live object covering ``addr``, as (kind, base), or None."""
        candidates = []
        for slab in self.slabs.values():
            base = slab.base_of(addr)
            if base is not None:
                candidates.append(base)
        if TASK_AREA <= addr < TASK_AREA + TASK_SLOT * MAX_PROCESSES:
            slot = TASK_AREA + (addr - TASK_AREA) // TASK_SLOT * TASK_SLOT
            candidates += [slot, slot + 64, slot + 512]
        i = bisect.bisect_right(self._extra, addr) - 1
        if i >= 0:
            candidates.append(self._extra[i])
        for base in candidates:
            kind = self.live.get(base)
            if kind is not None and base <= addr < base + self.profile.size(kind):
                return kind, base
        return None

    def cache_dentry_addrs(self) -> set[int]:
        return set(self.dentries.values())

    def known_dentries(self) -> set[int]:
        """Cache dentries, the root/console dentries and LRU-parked dentries."""
        return set(self.dentries.values()) | set(self.special_dentries.values()) | self.parked

    def path_of(self, dentry: int) -> Optional[str]:
        for path, addr in self.dentries.items():
            if addr == dentry:
                return path
        return None

    def clone(self) -> "GuestState":
        hook, self.breakpoint_hook = self.breakpoint_hook, None
        try:
            twin = copy.deepcopy(self)
        finally:
            self.breakpoint_hook = hook
        return twin


def clone_guest(state: GuestState, image: MemoryImage) -> tuple[GuestState, MemoryImage]:
    return state.clone(), image.clone()


# -- helpers over the profile -----------------------------------------------


class _Off:
    """Resolved field offsets for the hot syscall paths."""

    def __init__(self, profile: LayoutProfile) -> None:
        K = ObjectKind
        d = profile[K.DENTRY]
        self.d_size = d.size
        self.d_count = d.offset("d_count")
        self.d_next = d.offset("d_hash_next")
        self.d_prev = d.offset("d_hash_prev")
        self.d_parent = d.offset("d_parent")
        self.d_inode = d.offset("d_inode")
        self.d_name = d.offset("d_name")
        self.d_lru_next = d.offset("d_lru_next")
        self.d_lru_prev = d.offset("d_lru_prev")
        self.d_iname = d.offset("d_iname")
        self.name_width = d.field("d_iname").width
        i = profile[K.INODE]
        self.i_size_obj = i.size
        self.i_count = i.offset("i_count")
        self.i_dentry = i.offset("i_dentry")
        f = profile[K.FILE]
        self.f_size = f.size
        self.f_dentry = f.offset("f_dentry")
        self.f_inode = f.offset("f_inode")
        self.f_count = f.offset("f_count")
        self.f_pos = f.offset("f_pos")
        self.t_files = profile.offset(K.TASK, "files")
        self.fs_fdt = profile.offset(K.FILES_STRUCT, "fdt")
        self.fdt_size = profile.size(K.FDT)
        self.max_fds = self.fdt_size // 8


def offsets(profile: LayoutProfile) -> _Off:
    off = profile.__dict__.get("_resolved_offsets")
    if off is None:
        off = profile.__dict__["_resolved_offsets"] = _Off(profile)
    return off


def fnv1a(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def bucket_of(path: str) -> int:
    return fnv1a(path.encode()) % NUM_BUCKETS


def bucket_slot(state: GuestState, path: str) -> int:
    return state.buckets_addr + 8 * bucket_of(path)


# -- object creation ---------------------------------------------------------


def _new_dentry(
    state: GuestState,
    image: MemoryImage,
    ctx: AccessContext,
    addr: int,
    name: str,
    *,
    parent: int,
    inode: int,
    count: int = 0,
) -> None:
    # registered first so the kernel's own initialising writes are attributable
    state.register(addr, ObjectKind.DENTRY)
    encode_object(
        image,
        state.profile,
        ObjectKind.DENTRY,
        addr,
        {
            "d_count": count,
            "d_hash_next": 0,
            "d_hash_prev": 0,
            "d_parent": parent,
            "d_inode": inode,
            "d_name": addr + offsets(state.profile).d_iname,
            "d_lru_next": 0,
            "d_lru_prev": 0,
            "d_iname": pack_name(name),
        },
        ctx,
    )


def _new_inode(state: GuestState, image: MemoryImage, ctx: AccessContext, addr: int, dentry: int, mode: int) -> None:
    state.register(addr, ObjectKind.INODE)
    encode_object(
        image,
        state.profile,
        ObjectKind.INODE,
        addr,
        {"i_ino": state.next_ino, "i_count": 1, "i_dentry": dentry, "i_mode": mode, "i_size": 0},
        ctx,
    )
    state.next_ino += 1


def _new_file(state: GuestState, image: MemoryImage, ctx: AccessContext, dentry: int, inode: int) -> int:
    addr = state.slabs[ObjectKind.FILE].alloc()
    state.register(addr, ObjectKind.FILE)
    encode_object(
        image,
        state.profile,
        ObjectKind.FILE,
        addr,
        {"f_dentry": dentry, "f_inode": inode, "f_count": 1, "f_pos": 0, "f_flags": 0o1},
        ctx,
    )
    state.open_files.add(addr)
    return addr


def create_file(state: GuestState, image: MemoryImage, path: str, ctx: AccessContext = HYPERVISOR) -> int:
    """Create dentry+inode for ``path`` and push the dentry on its hash bucket."""
    off = offsets(state.profile)
    dentry = state.slabs[ObjectKind.DENTRY].alloc()
    inode = state.slabs[ObjectKind.INODE].alloc()
    _new_dentry(state, image, ctx, dentry, path, parent=ROOT_DENTRY, inode=inode)
    _new_inode(state, image, ctx, inode, dentry, 0o100644)
    slot = bucket_slot(state, path)
    head = image.read_word(ctx, slot)
    image.write_word(ctx, dentry + off.d_next, head)
    if head:
        image.write_word(ctx, head + off.d_prev, dentry)
    image.write_word(ctx, slot, dentry)
    state.dentries[path] = dentry
    state.inodes[path] = inode
    return dentry


def lookup(state: GuestState, image: MemoryImage, path: str, ctx: AccessContext = HYPERVISOR) -> int:
    """Walk the path's bucket from its head; 0 when absent."""
    off = offsets(state.profile)
    want = pack_name(path, off.name_width)
    node = image.read_word(ctx, bucket_slot(state, path))
    steps = 0
    while node:
        name_ptr = image.read_word(ctx, node + off.d_name)
        if image.read_bytes(ctx, name_ptr, off.name_width) == want:
            return node
        node = image.read_word(ctx, node + off.d_next)
        steps += 1
        if steps > len(state.live) + 1:
            raise RuntimeError(f"hash chain for {path!r} does not terminate")
    return 0


def build_guest(spec: GuestSpec, profile: Optional[LayoutProfile] = None) -> tuple[GuestState, MemoryImage]:
    """Build a seeded guest with ``spec.num_files`` cached files.

    File dentries are created in a seeded shuffled order, so slab slots and
    hash-chain order both depend on the seed.
    """
    profile = profile or default_profile()
    if spec.image_size < KERNEL_END:
        raise CapacityError(f"image of {spec.image_size:#x} bytes cannot hold the kernel layout")
    dsize = profile.size(ObjectKind.DENTRY)
    dstride = dsize if spec.interleave else PAGE_SIZE
    if spec.num_files > DENTRY_SLAB_LEN // dstride:
        raise CapacityError(f"{spec.num_files} dentries exceed slab capacity {DENTRY_SLAB_LEN // dstride}")
    if profile.size(ObjectKind.FDT) > TASK_SLOT - 512:
        raise CapacityError("fd table does not fit in a task slot")

    image = MemoryImage(spec.image_size)
    image.allocate_region(SYSCALL_ENTRY, 0x2000, tag="kernel")
    image.allocate_region(DENTRY_SLAB, KERNEL_END - DENTRY_SLAB, tag="kernel")
    state = GuestState(
        profile=profile, seed=spec.seed, interleave=spec.interleave, reclaim_period=spec.reclaim_period
    )
    state.slabs = {
        ObjectKind.DENTRY: Slab(ObjectKind.DENTRY, DENTRY_SLAB, DENTRY_SLAB_LEN, dstride),
        ObjectKind.INODE: Slab(ObjectKind.INODE, INODE_SLAB, INODE_SLAB_LEN, profile.size(ObjectKind.INODE)),
        ObjectKind.FILE: Slab(ObjectKind.FILE, FILE_SLAB, FILE_SLAB_LEN, profile.size(ObjectKind.FILE)),
    }
    hv = HYPERVISOR
    image.write_bytes(hv, SYSCALL_ENTRY, ENTRY_CODE)
    image.write_bytes(hv, SYSCALL_EXIT, EXIT_CODE)

    _new_dentry(state, image, hv, ROOT_DENTRY, "/", parent=ROOT_DENTRY, inode=ROOT_INODE, count=1)
    _new_inode(state, image, hv, ROOT_INODE, ROOT_DENTRY, 0o040755)
    _new_dentry(state, image, hv, CONSOLE_DENTRY, "console", parent=ROOT_DENTRY, inode=CONSOLE_INODE)
    _new_inode(state, image, hv, CONSOLE_INODE, CONSOLE_DENTRY, 0o020620)
    state.special_dentries = {"/": ROOT_DENTRY, "console": CONSOLE_DENTRY}

    rng = random.Random(spec.seed)
    names = [f"file_{i:04d}.txt" for i in range(spec.num_files)]
    order = list(range(spec.num_files))
    rng.shuffle(order)
    for i in order:
        create_file(state, image, names[i], hv)
    state.paths = names

    for pid in range(1, spec.num_processes + 1):
        spawn_process(state, image, pid)
    return state, image


def spawn_process(state: GuestState, image: MemoryImage, pid: int) -> int:
    """Create task, files_struct and fd table with stdio on fds 0-2."""
    if pid in state.processes or not 1 <= pid <= MAX_PROCESSES:
        raise ConfigError(f"cannot spawn pid {pid}")
    profile, hv = state.profile, HYPERVISOR
    off = offsets(profile)
    slot = TASK_AREA + (pid - 1) * TASK_SLOT
    task, files, fdt = slot, slot + 64, slot + 512
    encode_object(image, profile, ObjectKind.TASK, task, {"pid": pid, "files": files, "state": 1})
    encode_object(image, profile, ObjectKind.FILES_STRUCT, files, {"count": 1, "fdt": fdt, "max_fds": off.max_fds})
    for kind, addr in ((ObjectKind.TASK, task), (ObjectKind.FILES_STRUCT, files), (ObjectKind.FDT, fdt)):
        state.register(addr, kind)
    for fd in range(STDIO_FDS):
        f = _new_file(state, image, hv, CONSOLE_DENTRY, CONSOLE_INODE)
        image.write_word(hv, fdt + 8 * fd, f)
        count = image.read_word(hv, CONSOLE_DENTRY + off.d_count)
        image.write_word(hv, CONSOLE_DENTRY + off.d_count, count + 1)
    state.processes[pid] = task
    return task


# -- syscalls -----------------------------------------------------------------


def user_buffer(pid: int) -> int:
    return USER_AREA + (pid - 1) * USER_SLOT


def encode_request(state: GuestState, pid: int, req: SyscallRequest) -> Registers:
    """Register image for ``req``.  OPEN passes the path in ``pid``'s user buffer."""
    sp = user_buffer(pid) + USER_SLOT - 8
    if isinstance(req, Open):
        nr, args = Nr.OPEN, [user_buffer(pid), 0o1 | 0o100, 0o644]
    elif isinstance(req, Read):
        nr, args = Nr.READ, [req.fd, 0, req.length]
    elif isinstance(req, Write):
        nr, args = Nr.WRITE, [req.fd, 0, req.length]
    elif isinstance(req, Close):
        nr, args = Nr.CLOSE, [req.fd]
    elif isinstance(req, Mmap):
        nr, args = Nr.MMAP, [req.addr, req.length, 3, 0x22, 0, 0]
    elif isinstance(req, Munmap):
        nr, args = Nr.MUNMAP, [req.addr, req.length]
    else:
        raise TypeError(f"unknown request {req!r}")
    return Registers(ip=state.syscall_entry_addr, sp=sp, nr=nr, args=(args + [0] * 6)[:6])


def path_bytes(path: str) -> bytes:
    raw = path.encode() + b"\0"
    if len(raw) > USER_SLOT - 8:
        raise ValueError(f"path {path!r} too long")
    return raw


def _load_registers(state: GuestState, image: MemoryImage, pid: int, req: SyscallRequest) -> Registers:
    if isinstance(req, Open):
        image.write_bytes(AccessContext.guest(pid), user_buffer(pid), path_bytes(req.path))
    return encode_request(state, pid, req)


def _read_cstring(image: MemoryImage, ctx: AccessContext, addr: int, limit: int = USER_SLOT) -> str:
    raw = image.read_bytes(ctx, addr, limit)
    return raw.split(b"\0", 1)[0].decode()


def _armed(image: MemoryImage, addr: int) -> bool:
    return image.data[addr] == 0xCC


def exec_syscall(state: GuestState, image: MemoryImage, pid: int, req: SyscallRequest) -> SyscallResult:
    """Run one syscall for ``pid``.

    With breakpoints armed, the registered hook is called at the entry and
    exit INT3s.  The exit hook may ask for the syscall to be restarted from
    the entry, which is how an injected call hands control back to the
    original one.
    """
    if pid not in state.processes:
        raise ValueError(f"pid {pid} is not a live process")
    regs = _load_registers(state, image, pid, req)
    hook = state.breakpoint_hook
    while True:
        if hook is not None and _armed(image, state.syscall_entry_addr):
            hook.at_entry(state, image, pid, regs)
        regs.ret = _dispatch(state, image, pid, regs)
        regs.ip = state.syscall_exit_addr
        if hook is not None and _armed(image, state.syscall_exit_addr):
            if hook.at_exit(state, image, pid, regs):
                continue
        break
    state.syscall_count += 1
    if state.reclaim_period and state.syscall_count % state.reclaim_period == 0:
        reclaim_lru(state, image)
    return SyscallResult.from_ret(req, regs.ret)


def _dispatch(state: GuestState, image: MemoryImage, pid: int, regs: Registers) -> int:
    g = AccessContext.guest(pid)
    a = regs.args
    if regs.nr == Nr.OPEN:
        return _sys_open(state, image, g, _read_cstring(image, g, a[0]))
    if regs.nr in (Nr.READ, Nr.WRITE):
        return _sys_rw(state, image, g, a[0], a[2])
    if regs.nr == Nr.CLOSE:
        return _sys_close(state, image, g, a[0])
    if regs.nr == Nr.MMAP:
        try:
            image.allocate_region(a[0], a[1], tag="mmap")
        except RegionOverlapError:
            return -errno.EEXIST
        except (AlignmentError, MemoryRangeError):
            return -errno.EINVAL
        return a[0]
    if regs.nr == Nr.MUNMAP:
        region = image.regions.get(a[0])
        if region is None or region.tag != "mmap":
            return -errno.EINVAL
        try:
            image.release_region(a[0], a[1])
        except RegionNotFoundError:
            return -errno.EINVAL
        return 0
    return -errno.ENOSYS


def _fdt_of(state: GuestState, image: MemoryImage, g: AccessContext) -> int:
    off = offsets(state.profile)
    task = state.processes[g.pid]
    files = image.read_word(g, task + off.t_files)
    return image.read_word(g, files + off.fs_fdt)


def _file_of(state: GuestState, image: MemoryImage, g: AccessContext, fd: int) -> tuple[int, int]:
    off = offsets(state.profile)
    fdt = _fdt_of(state, image, g)
    if not 0 <= fd < off.max_fds:
        return fdt, 0
    return fdt, image.read_word(g, fdt + 8 * fd)


def _sys_open(state: GuestState, image: MemoryImage, g: AccessContext, path: str) -> int:
    off = offsets(state.profile)
    dentry = lookup(state, image, path, g)
    fdt = _fdt_of(state, image, g)
    slots = image.read_bytes(g, fdt, off.fdt_size)
    fd = next((i for i in range(off.max_fds) if not any(slots[8 * i : 8 * i + 8])), None)
    if fd is None:
        return -errno.EMFILE
    if not dentry:
        dentry = create_file(state, image, path, g)
    count = image.read_word(g, dentry + off.d_count)
    image.write_word(g, dentry + off.d_count, count + 1)
    inode = image.read_word(g, dentry + off.d_inode)
    f = _new_file(state, image, g, dentry, inode)
    image.write_word(g, fdt + 8 * fd, f)
    return fd


def _sys_rw(state: GuestState, image: MemoryImage, g: AccessContext, fd: int, length: int) -> int:
    off = offsets(state.profile)
    _, f = _file_of(state, image, g, fd)
    if not f:
        return -errno.EBADF
    image.read_word(g, f + off.f_count)
    pos = image.read_word(g, f + off.f_pos)
    image.write_word(g, f + off.f_pos, pos + length)
    dentry = image.read_word(g, f + off.f_dentry)
    image.read_word(g, dentry + off.d_count)
    inode = image.read_word(g, f + off.f_inode)
    image.read_word(g, inode + off.i_count)
    return length


def _sys_close(state: GuestState, image: MemoryImage, g: AccessContext, fd: int) -> int:
    off = offsets(state.profile)
    fdt, f = _file_of(state, image, g, fd)
    if not f:
        return -errno.EBADF
    image.write_word(g, fdt + 8 * fd, 0)
    dentry = image.read_word(g, f + off.f_dentry)
    count = image.read_word(g, dentry + off.d_count)
    image.write_word(g, dentry + off.d_count, count - 1)
    refs = image.read_word(g, f + off.f_count) - 1
    if refs:
        image.write_word(g, f + off.f_count, refs)
    else:
        image.write_bytes(g, f, bytes(off.f_size))
        state.slabs[ObjectKind.FILE].release(f)
        state.open_files.discard(f)
        state.unregister(f)
    return 0


# -- LRU -----------------------------------------------------------------------


def lru_add(state: GuestState, image: MemoryImage, dentry: int, ctx: AccessContext = HYPERVISOR) -> None:
    """Append ``dentry`` to the tail of the LRU list."""
    off = offsets(state.profile)
    last = image.read_word(ctx, LRU_LAST)
    image.write_word(ctx, dentry + off.d_lru_prev, last)
    image.write_word(ctx, dentry + off.d_lru_next, 0)
    if last:
        image.write_word(ctx, last + off.d_lru_next, dentry)
    else:
        image.write_word(ctx, LRU_FIRST, dentry)
    image.write_word(ctx, LRU_LAST, dentry)


def lru_entries(state: GuestState, image: MemoryImage) -> list[int]:
    off = offsets(state.profile)
    out = []
    node = image.read_word(HYPERVISOR, LRU_FIRST)
    while node:
        out.append(node)
        node = image.read_word(HYPERVISOR, node + off.d_lru_next)
        if len(out) > len(state.live):
            raise RuntimeError("LRU list does not terminate")
    return out


def _lru_unlink(image: MemoryImage, off: _Off, ctx: AccessContext, node: int) -> None:
    nxt = image.read_word(ctx, node + off.d_lru_next)
    prev = image.read_word(ctx, node + off.d_lru_prev)
    image.write_word(ctx, (prev + off.d_lru_next) if prev else LRU_FIRST, nxt)
    image.write_word(ctx, (nxt + off.d_lru_prev) if nxt else LRU_LAST, prev)


def _hash_unlink_if_linked(state: GuestState, image: MemoryImage, off: _Off, ctx: AccessContext, node: int) -> None:
    nxt = image.read_word(ctx, node + off.d_next)
    prev = image.read_word(ctx, node + off.d_prev)
    name = image.read_bytes(ctx, node + off.d_iname, off.name_width).split(b"\0", 1)[0].decode(errors="replace")
    head_slot = bucket_slot(state, name)
    link_slot = (prev + off.d_next) if prev else head_slot
    if image.read_word(ctx, link_slot) != node:
        return
    image.write_word(ctx, link_slot, nxt)
    if nxt:
        image.write_word(ctx, nxt + off.d_prev, prev)


def reclaim_lru(state: GuestState, image: MemoryImage) -> int:
    """Free every LRU dentry whose ``d_count`` is 0; returns how many."""
    off = offsets(state.profile)
    k = AccessContext.guest(KERNEL_PID)
    freed = 0
    node = image.read_word(k, LRU_FIRST)
    while node:
        nxt = image.read_word(k, node + off.d_lru_next)
        if image.read_word(k, node + off.d_count) == 0:
            _lru_unlink(image, off, k, node)
            _hash_unlink_if_linked(state, image, off, k, node)
            inode = image.read_word(k, node + off.d_inode)
            image.write_bytes(k, node, bytes(off.d_size))
            _forget_dentry(state, image, k, node, inode)
            freed += 1
        node = nxt
    return freed


def _forget_dentry(state: GuestState, image: MemoryImage, k: AccessContext, node: int, inode: int) -> None:
    off = offsets(state.profile)
    state.parked.discard(node)
    path = state.path_of(node)
    if path is not None:
        del state.dentries[path]
        if inode and state.inodes.get(path) == inode and image.read_word(k, inode + off.i_dentry) == node:
            image.write_bytes(k, inode, bytes(off.i_size_obj))
            state.slabs[ObjectKind.INODE].release(inode)
            state.unregister(inode)
            del state.inodes[path]
    slab = state.slabs[ObjectKind.DENTRY]
    if slab.base_of(node) == node:
        slab.release(node)
    state.unregister(node)


# -- decoys ------------------------------------------------------------------


def plant_decoy(state: GuestState, image: MemoryImage, value: int) -> int:
    """Store ``value`` as plain data in the next free data-area word; returns the slot.

    Decoys look exactly like pointers to a scanner but belong to no object,
    so a correct migration must leave them alone.
    """
    slot = DATA_AREA + WORD_SIZE * len(state.decoys)
    if slot + WORD_SIZE > DATA_AREA + DATA_AREA_LEN:
        raise CapacityError("data area is full of decoys")
    image.write_word(HYPERVISOR, slot, value)
    state.decoys.append(slot)
    return slot


# -- ground truth and invariants --------------------------------------------


@dataclass(frozen=True)
class PointerField:
    """One pointer-valued slot known from the object graph, not from scanning."""

    slot: int
    value: int
    owner_kind: Optional[ObjectKind]
    owner: int
    name: str


def pointer_fields(state: GuestState, image: MemoryImage) -> list[PointerField]:
    """Every non-null pointer field of every live object, plus global heads."""
    out = []
    words = image.words()
    for addr, kind in state.live.items():
        for f in state.profile[kind].pointer_fields():
            slot = addr + f.offset
            value = int(words[slot >> 3])
            if value:
                out.append(PointerField(slot, value, kind, addr, f.name))
    for b in range(NUM_BUCKETS):
        slot = state.buckets_addr + 8 * b
        value = int(words[slot >> 3])
        if value:
            out.append(PointerField(slot, value, None, state.buckets_addr, f"dentry_cache[{b}]"))
    for slot, name in ((LRU_FIRST, "lru_first"), (LRU_LAST, "lru_last")):
        value = int(words[slot >> 3])
        if value:
            out.append(PointerField(slot, value, None, slot, name))
    return out


def check_invariants(state: GuestState, image: MemoryImage) -> list[str]:
    """Cross-link and bookkeeping checks; returns human-readable violations."""
    off = offsets(state.profile)
    rd = lambda a: image.read_word(HYPERVISOR, a)  # noqa: E731
    problems = []
    file_refs: dict[int, int] = {}
    for f in state.open_files:
        d = rd(f + off.f_dentry)
        file_refs[d] = file_refs.get(d, 0) + 1
        if rd(d + off.d_inode) != rd(f + off.f_inode):
            problems.append(f"file {f:#x}: f_inode disagrees with dentry {d:#x}")
        if d not in state.live:
            problems.append(f"file {f:#x}: f_dentry {d:#x} is not a live object")
    for path, d in list(state.dentries.items()) + list(state.special_dentries.items()):
        if rd(d + off.d_name) != d + off.d_iname:
            problems.append(f"dentry {d:#x} ({path}): d_name does not point at d_iname")
        name = image.read_bytes(HYPERVISOR, d + off.d_iname, off.name_width)
        if name != pack_name(path, off.name_width):
            problems.append(f"dentry {d:#x} ({path}): name bytes corrupted")
        inode = rd(d + off.d_inode)
        if state.live.get(inode) is not ObjectKind.INODE:
            problems.append(f"dentry {d:#x} ({path}): d_inode {inode:#x} is not a live inode")
        elif rd(inode + off.i_dentry) != d:
            problems.append(f"dentry {d:#x} ({path}): inode {inode:#x} does not point back")
        count = rd(d + off.d_count)
        if count != file_refs.get(d, 0) + (1 if d == ROOT_DENTRY else 0):
            problems.append(f"dentry {d:#x} ({path}): d_count {count} != {file_refs.get(d, 0)} open files")
    for path, d in state.dentries.items():
        nxt, prev = rd(d + off.d_next), rd(d + off.d_prev)
        if nxt and rd(nxt + off.d_prev) != d:
            problems.append(f"dentry {d:#x} ({path}): next.prev != self")
        if prev and rd(prev + off.d_next) != d:
            problems.append(f"dentry {d:#x} ({path}): prev.next != self")
        if not prev and rd(bucket_slot(state, path)) != d:
            problems.append(f"dentry {d:#x} ({path}): chain head is not in its bucket")
        if lookup(state, image, path) != d:
            problems.append(f"dentry {d:#x} ({path}): bucket walk does not reach it")
    for pid, task in state.processes.items():
        files = rd(task + off.t_files)
        fdt = rd(files + off.fs_fdt)
        for fd in range(off.max_fds):
            f = rd(fdt + 8 * fd)
            if f and f not in state.open_files:
                problems.append(f"pid {pid}: fd {fd} -> {f:#x} is not an open file")
    return problems


def fd_table(state: GuestState, image: MemoryImage, pid: int) -> int:
    """Address of ``pid``'s fd table, read through task->files->fdt."""
    off = offsets(state.profile)
    files = image.read_word(HYPERVISOR, state.processes[pid] + off.t_files)
    return image.read_word(HYPERVISOR, files + off.fs_fdt)


def resolve_fd(state: GuestState, image: MemoryImage, pid: int, fd: int) -> int:
    return image.read_word(HYPERVISOR, fd_table(state, image, pid) + 8 * fd)
