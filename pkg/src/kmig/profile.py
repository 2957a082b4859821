"""Layout profiles for the simulated kernel objects.

A profile maps every :class:`ObjectKind` to an object size and a list of
fields.  The default layout is simulator-internal; it keeps the properties
migration depends on (fixed-offset name pointer, doubly linked hash chain,
refcount, LRU links) without copying any real kernel's struct offsets.

Dentry (128 bytes)::

    0   d_count        scalar
    8   d_hash_next    -> Dentry
    16  d_hash_prev    -> Dentry
    24  d_parent       -> Dentry
    32  d_inode        -> Inode
    40  d_name         -> NameBuffer (always self + 64)
    48  d_lru_next     -> Dentry
    56  d_lru_prev     -> Dentry
    64  d_iname        inline, 64 bytes
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Union

from kmig.errors import ProfileError
from kmig.memory import HYPERVISOR, AccessContext, MemoryImage

MAX_FDS = 64


class ObjectKind(str, Enum):
    DENTRY = "Dentry"
    INODE = "Inode"
    FILE = "File"
    FILES_STRUCT = "FilesStruct"
    FDT = "Fdt"
    TASK = "Task"
    NAME_BUFFER = "NameBuffer"


class FieldRole(str, Enum):
    SCALAR = "scalar"
    POINTER = "pointer"
    INLINE = "inline-buffer"


@dataclass(frozen=True)
class FieldSpec:
    name: str
    offset: int
    width: int
    role: FieldRole
    target: Optional[ObjectKind] = None

    @property
    def is_pointer(self) -> bool:
        return self.role is FieldRole.POINTER


@dataclass(frozen=True)
class ObjectLayout:
    kind: ObjectKind
    size: int
    fields: tuple[FieldSpec, ...]
    _by_name: dict = field(default_factory=dict, compare=False, repr=False)
    _by_offset: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        spans = sorted((f.offset, f.offset + f.width, f.name) for f in self.fields)
        for lo, hi, name in spans:
            if lo < 0 or hi > self.size:
                raise ProfileError(f"{self.kind.value}.{name} [{lo}, {hi}) exceeds size {self.size}")
        for (_, hi, a), (lo, _, b) in zip(spans, spans[1:]):
            if lo < hi:
                raise ProfileError(f"{self.kind.value}: fields {a} and {b} overlap")
        for f in self.fields:
            if f.is_pointer and f.width != 8:
                raise ProfileError(f"{self.kind.value}.{f.name}: pointers are 8 bytes wide")
            self._by_name[f.name] = f
            self._by_offset[f.offset] = f

    def field(self, name: str) -> FieldSpec:
        try:
            return self._by_name[name]
        except KeyError:
            raise ProfileError(f"{self.kind.value} has no field {name!r}") from None

    def offset(self, name: str) -> int:
        return self.field(name).offset

    def field_at(self, offset: int) -> Optional[FieldSpec]:
        return self._by_offset.get(offset)

    def pointer_fields(self) -> list[FieldSpec]:
        return [f for f in self.fields if f.is_pointer]


FieldValue = Union[int, bytes]


class LayoutProfile:
    """Immutable kind -> layout table."""

    def __init__(self, layouts: dict[ObjectKind, ObjectLayout]) -> None:
        missing = set(ObjectKind) - set(layouts)
        if missing:
            raise ProfileError(f"profile lacks layouts for {sorted(k.value for k in missing)}")
        self._layouts = dict(layouts)

    def __getitem__(self, kind: ObjectKind) -> ObjectLayout:
        return self._layouts[kind]

    def size(self, kind: ObjectKind) -> int:
        return self._layouts[kind].size

    def offset(self, kind: ObjectKind, name: str) -> int:
        return self._layouts[kind].offset(name)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, LayoutProfile) and self.to_dict() == other.to_dict()

    def to_dict(self) -> dict:
        out = {}
        for kind, layout in self._layouts.items():
            out[kind.value] = {
                "size": layout.size,
                "fields": [
                    {
                        "name": f.name,
                        "offset": f.offset,
                        "width": f.width,
                        "role": f.role.value,
                        "target": f.target.value if f.target else None,
                    }
                    for f in layout.fields
                ],
            }
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "LayoutProfile":
        layouts = {}
        try:
            for kind_name, entry in raw.items():
                kind = ObjectKind(kind_name)
                fields = tuple(
                    FieldSpec(
                        f["name"],
                        int(f["offset"]),
                        int(f["width"]),
                        FieldRole(f["role"]),
                        ObjectKind(f["target"]) if f.get("target") else None,
                    )
                    for f in entry["fields"]
                )
                layouts[kind] = ObjectLayout(kind, int(entry["size"]), fields)
        except (KeyError, ValueError, TypeError) as exc:
            raise ProfileError(f"bad profile document: {exc}") from exc
        return cls(layouts)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "LayoutProfile":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path: str | Path) -> "LayoutProfile":
        return cls.from_json(Path(path).read_text())


def _s(name: str, offset: int, width: int = 8) -> FieldSpec:
    return FieldSpec(name, offset, width, FieldRole.SCALAR)


def _p(name: str, offset: int, target: ObjectKind) -> FieldSpec:
    return FieldSpec(name, offset, 8, FieldRole.POINTER, target)


def default_profile(max_fds: int = MAX_FDS) -> LayoutProfile:
    K = ObjectKind
    return LayoutProfile(
        {
            K.DENTRY: ObjectLayout(
                K.DENTRY,
                128,
                (
                    _s("d_count", 0),
                    _p("d_hash_next", 8, K.DENTRY),
                    _p("d_hash_prev", 16, K.DENTRY),
                    _p("d_parent", 24, K.DENTRY),
                    _p("d_inode", 32, K.INODE),
                    _p("d_name", 40, K.NAME_BUFFER),
                    _p("d_lru_next", 48, K.DENTRY),
                    _p("d_lru_prev", 56, K.DENTRY),
                    FieldSpec("d_iname", 64, 64, FieldRole.INLINE, K.NAME_BUFFER),
                ),
            ),
            K.INODE: ObjectLayout(
                K.INODE,
                64,
                (_s("i_ino", 0), _s("i_count", 8), _p("i_dentry", 16, K.DENTRY), _s("i_mode", 24), _s("i_size", 32)),
            ),
            K.FILE: ObjectLayout(
                K.FILE,
                64,
                (_p("f_dentry", 0, K.DENTRY), _p("f_inode", 8, K.INODE), _s("f_count", 16), _s("f_pos", 24), _s("f_flags", 32)),
            ),
            K.FILES_STRUCT: ObjectLayout(
                K.FILES_STRUCT, 64, (_s("count", 0), _p("fdt", 8, K.FDT), _s("max_fds", 16))
            ),
            K.FDT: ObjectLayout(
                K.FDT, 8 * max_fds, tuple(_p(f"fd[{i}]", 8 * i, K.FILE) for i in range(max_fds))
            ),
            K.TASK: ObjectLayout(
                K.TASK, 64, (_s("pid", 0), _p("files", 8, K.FILES_STRUCT), _s("state", 16))
            ),
            K.NAME_BUFFER: ObjectLayout(
                K.NAME_BUFFER, 64, (FieldSpec("name", 0, 64, FieldRole.INLINE),)
            ),
        }
    )


def decode_object(
    image: MemoryImage, profile: LayoutProfile, kind: ObjectKind, addr: int
) -> dict[str, FieldValue]:
    """Read every field of the object at ``addr`` (hypervisor context)."""
    layout = profile[kind]
    raw = image.read_bytes(HYPERVISOR, addr, layout.size)
    out: dict[str, FieldValue] = {}
    for f in layout.fields:
        chunk = raw[f.offset : f.offset + f.width]
        if f.role is FieldRole.INLINE:
            out[f.name] = chunk
        else:
            out[f.name] = int.from_bytes(chunk, "little")
    return out


def encode_object(
    image: MemoryImage,
    profile: LayoutProfile,
    kind: ObjectKind,
    addr: int,
    fields: dict[str, FieldValue],
    ctx: AccessContext = HYPERVISOR,
) -> None:
    """Write the listed fields; fields not in ``fields`` are left alone."""
    layout = profile[kind]
    image._check_range(addr, layout.size)
    for name, value in fields.items():
        f = layout.field(name)
        if f.role is FieldRole.INLINE:
            data = bytes(value)
            if len(data) > f.width:
                raise ProfileError(f"{name}: {len(data)} bytes do not fit in {f.width}")
            data = data.ljust(f.width, b"\0")
        else:
            data = int(value).to_bytes(f.width, "little")
        image.write_bytes(ctx, addr + f.offset, data)


def pack_name(name: str, width: int = 64) -> bytes:
    raw = name.encode()[: width - 1]
    return raw.ljust(width, b"\0")


def unpack_name(raw: bytes) -> str:
    return raw.split(b"\0", 1)[0].decode(errors="replace")

