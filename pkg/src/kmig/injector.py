"""Syscall injection through INT3 breakpoints at the syscall entry and exit.

One injection cycle::

    Idle -arm-> Armed -entry INT3-> EntryTrapped -> InjectedExecuting
         -exit INT3-> ExitTrapped -restore-> Restored -original done-> Idle

At the entry trap the carrier's registers (and any memory the injected call
needs) are saved and replaced.  At the exit trap the injected result is
harvested, the saved context is put back and the instruction pointer is
reset to the entry, so the guest then runs its own syscall untouched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Optional, Union

from kmig.errors import InjectionFailed, InjectionTimeout, InjectorStateError
from kmig.kernel import (
    DEFAULT_PROTECTED_BASE,
    GuestState,
    Mmap,
    Munmap,
    Open,
    Registers,
    SyscallRequest,
    SyscallResult,
    encode_request,
    exec_syscall,
    path_bytes,
    request_to_dict,
    user_buffer,
)
from kmig.memory import HYPERVISOR, PAGE_SIZE, MemoryImage

INT3 = 0xCC


class Phase(str, Enum):
    IDLE = "Idle"
    ARMED = "Armed"
    ENTRY_TRAPPED = "EntryTrapped"
    INJECTED_EXECUTING = "InjectedExecuting"
    EXIT_TRAPPED = "ExitTrapped"
    RESTORED = "Restored"


_NEXT = {
    Phase.IDLE: Phase.ARMED,
    Phase.ARMED: Phase.ENTRY_TRAPPED,
    Phase.ENTRY_TRAPPED: Phase.INJECTED_EXECUTING,
    Phase.INJECTED_EXECUTING: Phase.EXIT_TRAPPED,
    Phase.EXIT_TRAPPED: Phase.RESTORED,
    Phase.RESTORED: Phase.IDLE,
}


@dataclass
class SavedContext:
    ip: int
    sp: int
    syscall_number: int
    args: tuple[int, ...]
    overwritten_bytes: list[tuple[int, bytes]] = field(default_factory=list)

    @classmethod
    def save(cls, regs: Registers) -> "SavedContext":
        return cls(regs.ip, regs.sp, regs.nr, tuple(regs.args))

    def restore(self, regs: Registers, image: MemoryImage) -> None:
        regs.ip, regs.sp, regs.nr = self.ip, self.sp, self.syscall_number
        regs.args = list(self.args)
        for addr, original in reversed(self.overwritten_bytes):
            image.write_bytes(HYPERVISOR, addr, original)


# A driver step is a (pid, request) the guest issues, or None for an idle tick.
DriverStep = Optional[tuple[int, SyscallRequest]]


class Injector:
    """Hypervisor-side injector for one guest; at most one injection in flight."""

    def __init__(self, protected_base: int = DEFAULT_PROTECTED_BASE, timeout_steps: int = 16) -> None:
        self.phase = Phase.IDLE
        self.protected_base = protected_base
        self.timeout_steps = timeout_steps
        self.audit: list[dict] = []
        self._original_code: dict[int, int] = {}
        self._pending: Optional[SyscallRequest] = None
        self._saved: Optional[SavedContext] = None
        self._result: Optional[SyscallResult] = None
        self._record: Optional[dict] = None
        self.last_original_result: Optional[SyscallResult] = None
        self._original_pid: Optional[int] = None

    def _go(self, phase: Phase) -> None:
        if _NEXT[self.phase] is not phase:
            raise InjectorStateError(f"illegal transition {self.phase.value} -> {phase.value}")
        self.phase = phase
        if self._record is not None:
            self._record["transitions"].append(phase.value)

    # -- breakpoints ---------------------------------------------------------

    def arm(self, state: GuestState, image: MemoryImage) -> None:
        if self.phase is not Phase.IDLE:
            raise InjectorStateError(f"arm() needs phase Idle, not {self.phase.value}")
        for addr in (state.syscall_entry_addr, state.syscall_exit_addr):
            self._original_code[addr] = image.read_bytes(HYPERVISOR, addr, 1)[0]
            image.write_bytes(HYPERVISOR, addr, bytes([INT3]))
        state.breakpoint_hook = self
        self._go(Phase.ARMED)

    def disarm(self, state: GuestState, image: MemoryImage) -> None:
        if self.phase not in (Phase.ARMED, Phase.RESTORED):
            raise InjectorStateError(f"disarm() needs phase Armed, not {self.phase.value}")
        self._remove_breakpoints(state, image)
        self.phase = Phase.IDLE
        self._pending = None

    def _remove_breakpoints(self, state: GuestState, image: MemoryImage) -> None:
        for addr, byte in self._original_code.items():
            image.write_bytes(HYPERVISOR, addr, bytes([byte]))
        self._original_code.clear()
        if state.breakpoint_hook is self:
            state.breakpoint_hook = None

    # -- hooks called by the guest's syscall path ---------------------------------

    def at_entry(self, state: GuestState, image: MemoryImage, pid: int, regs: Registers) -> None:
        if self.phase is Phase.RESTORED or self._pending is None:
            return
        if self.phase is not Phase.ARMED:
            raise InjectorStateError(f"entry trap in phase {self.phase.value}")
        self._go(Phase.ENTRY_TRAPPED)
        self._saved = SavedContext.save(regs)
        self._original_pid = pid
        self._record["pid"] = pid
        injected = _load_registers_hv(state, image, pid, self._pending, self._saved)
        regs.nr, regs.args = injected.nr, injected.args
        self._go(Phase.INJECTED_EXECUTING)

    def at_exit(self, state: GuestState, image: MemoryImage, pid: int, regs: Registers) -> bool:
        if self.phase is Phase.INJECTED_EXECUTING:
            self._go(Phase.EXIT_TRAPPED)
            self._result = SyscallResult.from_ret(self._pending, regs.ret)
            self._saved.restore(regs, image)
            regs.ip = state.syscall_entry_addr
            regs.ret = 0
            self._go(Phase.RESTORED)
            return True
        if self.phase is Phase.RESTORED:
            self._remove_breakpoints(state, image)
            self._go(Phase.IDLE)
            return False
        return False

    # -- driving an injection -------------------------------------------------------

    def inject(
        self,
        state: GuestState,
        image: MemoryImage,
        injected: SyscallRequest,
        driver: Iterable[DriverStep],
    ) -> SyscallResult:
        """Piggyback ``injected`` on the next syscall the driver makes the guest issue.

        The carrier's own syscall still runs afterwards; its result is kept
        in :attr:`last_original_result`.  Raises :class:`InjectionTimeout` if
        no syscall arrives within ``timeout_steps`` driver steps.
        """
        if self.phase is not Phase.ARMED:
            raise InjectorStateError(f"inject() needs phase Armed, not {self.phase.value}")
        if self._pending is not None:
            raise InjectorStateError("an injection is already in flight")
        self._pending = injected
        self._result = None
        self._record = {"transitions": [Phase.ARMED.value], "pid": None, "injected": request_to_dict(injected)}
        steps: Iterator[DriverStep] = iter(driver)
        try:
            for _ in range(self.timeout_steps):
                step = next(steps, None)
                if step is None:
                    continue
                pid, request = step
                self.last_original_result = exec_syscall(state, image, pid, request)
                if self.phase is Phase.IDLE:
                    break
                if self.phase is not Phase.ARMED:
                    raise InjectorStateError(f"syscall ended in phase {self.phase.value}")
            else:
                raise InjectionTimeout(f"no guest syscall within {self.timeout_steps} steps")
        finally:
            self._pending = None
        result = self._result
        self._record.update(
            result=result.to_dict(),
            original=self.last_original_result.to_dict(),
            restored=True,
        )
        self.audit.append(self._record)
        self._record = None
        return result

    def allocate_protected_area(
        self, state: GuestState, image: MemoryImage, length: int, driver: Iterable[DriverStep]
    ) -> int:
        """Inject MMAP at the next free protected base; returns the area start."""
        if self.phase is Phase.IDLE:
            self.arm(state, image)
        elif self.phase is not Phase.ARMED:
            raise InjectorStateError(f"cannot allocate in phase {self.phase.value}")
        try:
            result = self.inject(state, image, Mmap(self.protected_base, length), driver)
        except InjectionTimeout:
            self.disarm(state, image)
            raise
        if not result.ok:
            raise InjectionFailed(f"injected MMAP at {self.protected_base:#x} failed with errno {result.errno}")
        pages = -(-length // PAGE_SIZE)
        self.protected_base = result.value + pages * PAGE_SIZE
        return result.value

    def release_protected_area(
        self, state: GuestState, image: MemoryImage, addr: int, length: int, driver: Iterable[DriverStep]
    ) -> SyscallResult:
        if self.phase is Phase.IDLE:
            self.arm(state, image)
        return self.inject(state, image, Munmap(addr, length), driver)

    def audit_jsonl(self) -> str:
        return "".join(json.dumps(rec) + "\n" for rec in self.audit)

    def write_audit(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.audit_jsonl())


def _load_registers_hv(
    state: GuestState, image: MemoryImage, pid: int, req: SyscallRequest, saved: SavedContext
) -> Registers:
    """Registers for an injected call; memory arguments are written hypervisor-side."""
    if isinstance(req, Open):
        buf = user_buffer(pid)
        raw = path_bytes(req.path)
        saved.overwritten_bytes.append((buf, image.read_bytes(HYPERVISOR, buf, len(raw))))
        image.write_bytes(HYPERVISOR, buf, raw)
    return encode_request(state, pid, req)


def carrier(pid: int, request: SyscallRequest, idle_first: int = 0) -> Iterator[DriverStep]:
    """Driver that idles ``idle_first`` ticks, then has ``pid`` issue ``request`` forever."""
    for _ in range(idle_first):
        yield None
    while True:
        yield pid, request


def idle() -> Iterator[DriverStep]:
    while True:
        yield None
