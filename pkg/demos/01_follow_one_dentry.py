"""
Following one dentry into protected memory
==========================================

Two processes open the same file.  In between, the guest is paused, a
protected area is borrowed from the guest with an injected MMAP, and the
file's dentry is moved there.  The second open then lands on the trapped
page and nothing else does.
"""

from kmig import GuestSpec, Injector, PageMonitor, build_guest, carrier, exec_syscall, migrate_dentry
from kmig.kernel import Open, Read
from kmig.memory import HYPERVISOR

state, image = build_guest(GuestSpec(num_files=400, num_processes=2, seed=1))

# pid 1 opens the file; the dentry now has one reference
exec_syscall(state, image, 1, Open("test.txt"))
src = state.dentries["test.txt"]
print(f"dentry of test.txt at {src:#x}, d_count={image.read_word(HYPERVISOR, src)}")

# borrow 128 KB of guest memory by piggybacking an MMAP on pid 1's next read
injector = Injector()
area_start = injector.allocate_protected_area(state, image, 128 * 1024, carrier(1, Read(0, 1)))
area = image.regions[area_start]
print("injection went through", " -> ".join(injector.audit[-1]["transitions"]))

report = migrate_dentry(image, state.profile, state, src, area.start)
for hit in report.rewritten:
    print(f"  rewrote {hit.slot_addr:#x}  {hit.ptype.name:<13} {hit.classification.value}")

monitor = PageMonitor(image, state)
monitor.monitored.add(report.dest)
monitor.register_watch(area.page_range)

exec_syscall(state, image, 2, Open("test.txt"))
print(f"after pid 2 opens it: d_count={image.read_word(HYPERVISOR, report.dest)}")
for event in monitor.events:
    print(f"  event {event.kind.name.lower():5} page {event.page:#x} +{event.offset:<3} {event.attributed.cls.value}")
