"""Contiguous float32 tensors and the bucket arena used for flattening.

A ``FlatTensor`` always stores its values as a 1-D float32 array; ``shape`` is
metadata only. ``flatten`` copies a group of tensors once into a single
``BucketArena`` and rebinds every tensor's storage to a view of the arena, so
later writes through either side are visible through both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import count

import numpy as np

DTYPE = np.float32

_arena_ids = count()


class TensorError(ValueError):
    pass


class FlatTensor:
    """A named float32 buffer with shape metadata."""

    __slots__ = ("name", "shape", "data", "view")

    def __init__(self, name: str, data, shape=None):
        if not name:
            raise TensorError("tensor name must be non-empty")
        arr = np.asarray(data, dtype=DTYPE)
        if shape is None:
            shape = arr.shape if arr.ndim else (1,)
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise TensorError(f"{name}: shape dimensions must be positive, got {shape}")
        arr = arr.reshape(-1)
        if math.prod(shape) != arr.size:
            raise TensorError(f"{name}: shape {shape} does not match {arr.size} elements")
        self.name = name
        self.shape = shape
        self.data = arr if arr.flags.writeable and arr.base is None else arr.copy()
        self.view: TensorView | None = None

    def __len__(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """The values reshaped to ``shape``; shares memory with ``data``."""
        return self.data.reshape(self.shape)

    def __repr__(self) -> str:
        return f"FlatTensor({self.name!r}, shape={self.shape})"


@dataclass(frozen=True)
class TensorView:
    arena_id: int
    offset: int
    length: int
    logical: FlatTensor = field(compare=False, repr=False)


class BucketArena:
    """One contiguous float32 allocation backing several tensors in order."""

    def __init__(self, storage: np.ndarray, members: list[TensorView]):
        self.id = members[0].arena_id if members else next(_arena_ids)
        self.storage = storage
        self.members = members

    def __len__(self) -> int:
        return self.storage.size

    @property
    def names(self) -> list[str]:
        return [m.logical.name for m in self.members]

    def member(self, name: str) -> FlatTensor:
        for m in self.members:
            if m.logical.name == name:
                return m.logical
        raise KeyError(name)

    def check(self) -> None:
        """Verify the layout invariant: members tile [0, len) in order."""
        if not self.members:
            raise TensorError("arena has no members")
        pos = 0
        for m in self.members:
            if m.arena_id != self.id or m.offset != pos or m.length <= 0:
                raise TensorError(f"arena {self.id}: bad view {m}")
            if not np.shares_memory(m.logical.data, self.storage):
                raise TensorError(f"{m.logical.name} no longer aliases arena {self.id}")
            pos += m.length
        if pos != self.storage.size:
            raise TensorError(f"arena {self.id}: members cover {pos} of {self.storage.size}")


def flatten(tensors: list[FlatTensor]) -> BucketArena:
    if not tensors:
        raise TensorError("cannot flatten an empty tensor list")
    seen = set()
    for t in tensors:
        if t.name in seen:
            raise TensorError(f"duplicate tensor name {t.name!r}")
        seen.add(t.name)
        if t.data.size == 0:
            raise TensorError(f"{t.name}: zero-length tensor")

    total = sum(t.data.size for t in tensors)
    storage = np.empty(total, dtype=DTYPE)
    arena_id = next(_arena_ids)
    members = []
    pos = 0
    for t in tensors:
        n = t.data.size
        storage[pos:pos + n] = t.data
        t.data = storage[pos:pos + n]
        view = TensorView(arena_id, pos, n, t)
        t.view = view
        members.append(view)
        pos += n
    return BucketArena(storage, members)


def as_flat(arena: BucketArena) -> FlatTensor:
    """A single tensor over the whole arena; writes propagate to member views."""
    if not arena.members:
        raise TensorError("arena has no members")
    flat = FlatTensor.__new__(FlatTensor)
    flat.name = f"arena{arena.id}"
    flat.shape = (arena.storage.size,)
    flat.data = arena.storage
    flat.view = None
    return flat
