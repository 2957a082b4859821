import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from kmig import GuestSpec, build_guest
from kmig.kernel import Close, Open, Read, Write, exec_syscall
from kmig.memory import HYPERVISOR, PAGE_SIZE, AccessKind
from kmig.monitor import (
    TRACE_RECORD,
    Action,
    AttributionClass,
    PageMonitor,
    Policy,
    attribute_event,
    read_binary_trace,
)
from kmig.profile import ObjectKind
from oracles import replay


def test_untouched_pages_stay_quiet(small_guest):
    state, image = small_guest
    mon = PageMonitor(image, state)
    mon.register_watch([0xF00, 0xF01])
    image.write_word(HYPERVISOR, 0xF00 * PAGE_SIZE, 1)
    exec_syscall(state, image, 1, Open("file_0001.txt"))
    assert mon.event_counts()["total"] == 0


def test_read_of_monitored_dentry_is_attributed(small_guest):
    state, image = small_guest
    fd = exec_syscall(state, image, 1, Open("file_0002.txt")).value
    d = state.dentries["file_0002.txt"]
    mon = PageMonitor(image, state)
    mon.watch_objects([(d, 128)])
    image.trace = []
    exec_syscall(state, image, 1, Read(fd, 8))
    reads = [e for e in mon.events if e.kind is AccessKind.READ and e.attributed.addr == d]
    assert reads and reads[0].attributed.cls is AttributionClass.MONITORED
    flags = {p: (f.trap_read, f.trap_write) for p, f in image.trapped_pages().items()}
    assert replay(image.trace, flags) == len(mon.events)


def test_unregister(small_guest):
    state, image = small_guest
    mon = PageMonitor(image, state)
    pages = sorted({a // PAGE_SIZE for a in state.dentries.values()})
    mon.register_watch(pages)
    mon.unregister_watch(pages)
    mon.unregister_watch(pages)
    for p in state.paths[:10]:
        exec_syscall(state, image, 1, Open(p))
    assert mon.events == []
    mon.register_watch(pages)
    mon.unregister_watch(pages[:-1])
    for p in state.paths:
        exec_syscall(state, image, 2, Open(p))
    assert mon.events and {e.page for e in mon.events} == {pages[-1]}


def test_attribution_classes(small_guest):
    state, image = small_guest
    d = state.dentries["file_0000.txt"]
    neighbor = next(a for a in state.dentries.values() if a // PAGE_SIZE == d // PAGE_SIZE and a != d)
    assert attribute_event(d + 8, state, image, {d}).cls is AttributionClass.MONITORED
    n = attribute_event(neighbor + 8, state, image, {d})
    assert n.cls is AttributionClass.UNMONITORED and (n.kind, n.addr) == (ObjectKind.DENTRY, neighbor)
    image.allocate_region(0x400000, PAGE_SIZE)
    assert attribute_event(0x400F00, state, image, {d}).cls is AttributionClass.PROTECTED_BOOKKEEPING
    assert attribute_event(0xF00000, state, image, {d}).cls is AttributionClass.UNKNOWN


def test_counts_exports_and_reset(small_guest, tmp_path):
    state, image = small_guest
    mon = PageMonitor(image, state)
    mon.watch_objects([(state.dentries[p], 128) for p in state.paths[:3]])
    for p in state.paths[:6]:
        fd = exec_syscall(state, image, 1, Open(p)).value
        exec_syscall(state, image, 1, Write(fd, 1))
        exec_syscall(state, image, 1, Close(fd))
    counts = mon.event_counts()
    assert counts["total"] == len(mon.events) == sum(counts["by_kind"].values())
    assert sum(counts["by_attribution"].values()) == counts["total"] == sum(counts["by_page"].values())
    assert mon.alerts == [e for e in mon.events if e.kind is AccessKind.WRITE and not e.is_false_trigger]

    mon.export(tmp_path / "t.bin", binary=True)
    blob = (tmp_path / "t.bin").read_bytes()
    assert TRACE_RECORD.size == 19 and len(blob) == 19 * len(mon.events)
    first = struct.unpack_from("<QIHBI", blob)
    assert first == (0, mon.events[0].page, mon.events[0].offset, int(mon.events[0].kind), 1)
    assert len(read_binary_trace(blob)) == len(mon.events)
    mon.export(tmp_path / "t.jsonl")
    assert len((tmp_path / "t.jsonl").read_text().splitlines()) == len(mon.events)
    mon.reset()
    assert mon.event_counts()["total"] == 0


def test_policy_must_be_total():
    with pytest.raises(ValueError):
        Policy({(AccessKind.READ, AttributionClass.MONITORED): Action.LOG})


steps = st.lists(
    st.one_of(
        st.tuples(st.just("watch"), st.integers(0, 12), st.booleans(), st.booleans()),
        st.tuples(st.just("unwatch"), st.integers(0, 12), st.just(False), st.just(False)),
        st.tuples(st.just("io"), st.integers(0, 29), st.booleans(), st.just(False)),
    ),
    max_size=40,
)


@given(steps)
def test_counters_and_flags_agree_with_the_log(script):
    state, image = build_guest(GuestSpec(num_files=30, num_processes=2, seed=5))
    mon = PageMonitor(image, state)
    seen_flags = []
    original = image.trap_handler

    def spy(page, offset, kind, pid):
        seen_flags.append(image.flags(page).trap_write if kind else image.flags(page).trap_read)
        original(page, offset, kind, pid)

    image.trap_handler = spy
    pages = sorted({a // PAGE_SIZE for a in state.dentries.values()}) + [0x300, 0x2C0, 0x340]
    image.trace = []
    expected = 0
    for op, n, a, b in script:
        if op == "watch":
            mon.register_watch([pages[n % len(pages)]], read=a, write=b)
        elif op == "unwatch":
            mon.unregister_watch([pages[n % len(pages)]])
        else:
            flags = {p: (f.trap_read, f.trap_write) for p, f in image.trapped_pages().items()}
            start = len(image.trace)
            fd = exec_syscall(state, image, 1 + a, Open(state.paths[n])).value
            exec_syscall(state, image, 1 + a, Read(fd, 3))
            exec_syscall(state, image, 1 + a, Close(fd))
            expected += replay(image.trace[start:], flags)
    assert all(seen_flags)
    assert mon.event_counts()["total"] == len(mon.events) == expected
    assert [e.seq for e in mon.events] == list(range(len(mon.events)))
