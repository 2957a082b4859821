"""Cross-link verification for candidate pointer slots.

A word equal to an object's address is only treated as a pointer when the
object graph around it agrees: a file's ``f_dentry`` counts if the same
file's ``f_inode`` is the dentry's inode, a hash-chain link counts if the
neighbour it came from is linked back, and so on.  Anything else is
``UNVERIFIED`` and will never be rewritten by migration.
"""

from __future__ import annotations

from enum import Enum
from typing import Optional

from kmig.kernel import (
    LRU_FIRST,
    LRU_LAST,
    NUM_BUCKETS,
    GuestState,
    bucket_slot,
    offsets,
)
from kmig.memory import HYPERVISOR, MemoryImage
from kmig.profile import LayoutProfile, ObjectKind, unpack_name


class Classification(str, Enum):
    FILE_BACKREF = "ConfirmedFileBackref"
    INODE_BACKREF = "ConfirmedInodeBackref"
    HASH_NEIGHBOR = "ConfirmedHashNeighbor"
    LRU_NEIGHBOR = "ConfirmedLruNeighbor"
    HASH_HEAD = "ConfirmedHashHead"
    LRU_HEAD = "ConfirmedLruHead"
    PARENT_BACKREF = "ConfirmedParentBackref"
    FDT_OWNER = "ConfirmedFdtOwner"
    INTERNAL = "ConfirmedInternal"
    UNVERIFIED = "Unverified"

    @property
    def confirmed(self) -> bool:
        return self is not Classification.UNVERIFIED

    @property
    def is_list_link(self) -> bool:
        return self in (Classification.HASH_NEIGHBOR, Classification.LRU_NEIGHBOR)


Owner = Optional[tuple[Optional[ObjectKind], int]]


def verify_cross_links(
    image: MemoryImage,
    profile: LayoutProfile,
    state: GuestState,
    candidate_addr: int,
    slot_addr: int,
    kind: ObjectKind = ObjectKind.DENTRY,
) -> tuple[Classification, Owner]:
    """Classify the word at ``slot_addr`` that holds ``candidate_addr``.

    Returns the classification and the owning object of the slot (kind and
    base address; kind is None for global list heads), or None when the
    slot could not be attributed.
    """
    if kind is ObjectKind.FDT:
        return _verify_fdt(image, profile, state, candidate_addr, slot_addr)
    if kind is not ObjectKind.DENTRY:
        return Classification.UNVERIFIED, None

    off = offsets(profile)
    rd = lambda a: image.read_word(HYPERVISOR, a)  # noqa: E731
    d = candidate_addr
    d_inode = rd(d + off.d_inode)

    # file->f_dentry, cross-checked through f_inode
    f = slot_addr - off.f_dentry
    if f in state.open_files and state.live.get(f) is ObjectKind.FILE:
        if rd(f + off.f_inode) == d_inode and d_inode:
            return Classification.FILE_BACKREF, (ObjectKind.FILE, f)
        return Classification.UNVERIFIED, (ObjectKind.FILE, f)

    # inode->i_dentry of the dentry's own inode
    if d_inode and state.live.get(d_inode) is ObjectKind.INODE and slot_addr == d_inode + off.i_dentry:
        return Classification.INODE_BACKREF, (ObjectKind.INODE, d_inode)

    known = state.known_dentries()
    for link, opposite, cls in (
        (off.d_next, off.d_prev, Classification.HASH_NEIGHBOR),
        (off.d_prev, off.d_next, Classification.HASH_NEIGHBOR),
        (off.d_lru_next, off.d_lru_prev, Classification.LRU_NEIGHBOR),
        (off.d_lru_prev, off.d_lru_next, Classification.LRU_NEIGHBOR),
    ):
        neighbor = slot_addr - link
        if neighbor != d and neighbor in known:
            if rd(d + opposite) == neighbor:
                return cls, (ObjectKind.DENTRY, neighbor)
            return Classification.UNVERIFIED, (ObjectKind.DENTRY, neighbor)

    child = slot_addr - off.d_parent
    if child != d and child in known:
        return Classification.PARENT_BACKREF, (ObjectKind.DENTRY, child)

    buckets = state.buckets_addr
    if buckets <= slot_addr < buckets + 8 * NUM_BUCKETS and not (slot_addr - buckets) % 8:
        name = unpack_name(image.read_bytes(HYPERVISOR, d + off.d_iname, off.name_width))
        if rd(d + off.d_prev) == 0 and bucket_slot(state, name) == slot_addr:
            return Classification.HASH_HEAD, (None, buckets)
        return Classification.UNVERIFIED, (None, buckets)

    if slot_addr == LRU_FIRST and rd(d + off.d_lru_prev) == 0:
        return Classification.LRU_HEAD, (None, LRU_FIRST)
    if slot_addr == LRU_LAST and rd(d + off.d_lru_next) == 0:
        return Classification.LRU_HEAD, (None, LRU_LAST)

    owner = state.object_at(slot_addr)
    return Classification.UNVERIFIED, (owner if owner is None else (owner[0], owner[1]))


def _verify_fdt(
    image: MemoryImage, profile: LayoutProfile, state: GuestState, fdt: int, slot_addr: int
) -> tuple[Classification, Owner]:
    fdt_field = profile.offset(ObjectKind.FILES_STRUCT, "fdt")
    files_field = profile.offset(ObjectKind.TASK, "files")
    files = slot_addr - fdt_field
    if state.live.get(files) is ObjectKind.FILES_STRUCT:
        # a files_struct is only trusted if some task points at it
        for task in state.processes.values():
            if image.read_word(HYPERVISOR, task + files_field) == files:
                return Classification.FDT_OWNER, (ObjectKind.FILES_STRUCT, files)
    owner = state.object_at(slot_addr)
    return Classification.UNVERIFIED, owner


def internal_classification(
    profile: LayoutProfile, kind: ObjectKind, src: int, slot_addr: int, value: int
) -> Classification:
    """Classify a slot inside the source object that points back into it."""
    layout = profile[kind]
    f = layout.field_at(slot_addr - src)
    if f is None or not f.is_pointer:
        return Classification.UNVERIFIED
    if kind is ObjectKind.DENTRY and f.name == "d_name":
        return Classification.INTERNAL if value == src + layout.offset("d_iname") else Classification.UNVERIFIED
    if kind is ObjectKind.DENTRY and f.name == "d_parent":
        return Classification.INTERNAL if value == src else Classification.UNVERIFIED
    return Classification.UNVERIFIED
