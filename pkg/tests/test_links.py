from hypothesis import given
from hypothesis import strategies as st

from kmig import GuestSpec, build_guest
from kmig.kernel import Open, exec_syscall, plant_decoy, pointer_fields
from kmig.links import Classification, verify_cross_links
from kmig.memory import HYPERVISOR
from kmig.profile import ObjectKind


def test_file_backref(small_guest):
    state, image = small_guest
    exec_syscall(state, image, 1, Open("file_0004.txt"))
    d = state.dentries["file_0004.txt"]
    f = next(x for x in state.open_files if image.read_word(HYPERVISOR, x) == d)
    cls, owner = verify_cross_links(image, state.profile, state, d, f)
    assert cls is Classification.FILE_BACKREF and owner == (ObjectKind.FILE, f)


def test_decoy_is_unverified(small_guest):
    state, image = small_guest
    d = state.dentries["file_0004.txt"]
    slot = plant_decoy(state, image, d)
    assert verify_cross_links(image, state.profile, state, d, slot)[0] is Classification.UNVERIFIED
    # a decoy inside another dentry's name buffer is no better
    other = state.dentries["file_0005.txt"]
    image.write_word(HYPERVISOR, other + 64 + 16, d)
    assert verify_cross_links(image, state.profile, state, d, other + 80)[0] is Classification.UNVERIFIED


def test_hash_neighbor(small_guest):
    state, image = small_guest
    # find a dentry with a successor in its chain
    for d in state.dentries.values():
        nxt = image.read_word(HYPERVISOR, d + 8)
        if nxt:
            cls, owner = verify_cross_links(image, state.profile, state, d, nxt + 16)
            assert cls is Classification.HASH_NEIGHBOR and owner == (ObjectKind.DENTRY, nxt)
            return
    raise AssertionError("no chain with two members")


def test_forged_link_without_back_pointer_is_unverified(small_guest):
    state, image = small_guest
    a, b = state.dentries["file_0001.txt"], state.dentries["file_0002.txt"]
    if image.read_word(HYPERVISOR, b + 8) == a:
        a, b = b, a
    image.write_word(HYPERVISOR, a + 8, b)  # a.next = b, but b.prev is not a
    if image.read_word(HYPERVISOR, b + 16) != a:
        assert verify_cross_links(image, state.profile, state, b, a + 8)[0] is Classification.UNVERIFIED


@given(seed=st.integers(0, 10_000), opens=st.lists(st.integers(0, 29), max_size=8))
def test_sound_and_complete_on_builder_states(seed, opens):
    state, image = build_guest(GuestSpec(num_files=30, num_processes=2, seed=seed))
    for i in opens:
        exec_syscall(state, image, 1 + i % 2, Open(f"file_{i:04d}.txt"))
    truth = {pf.slot: pf for pf in pointer_fields(state, image)}
    dentries = set(state.dentries.values()) | set(state.special_dentries.values())
    for pf in truth.values():
        if pf.value in dentries and pf.slot != pf.value + 40 and not (pf.owner == pf.value):
            cls, _ = verify_cross_links(image, state.profile, state, pf.value, pf.slot)
            assert cls.confirmed, (pf, cls)
    for d in dentries:
        words = image.words()
        for slot in (words == d).nonzero()[0] * 8:
            slot = int(slot)
            if d <= slot < d + 128:
                continue
            cls, _ = verify_cross_links(image, state.profile, state, d, slot)
            if cls.confirmed:
                assert slot in truth
