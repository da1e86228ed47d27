"""Shape-aware flat containers generic over the scalar backend."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Sequence, Tuple


@dataclass
class Tensor:
    """Row-major flat payload plus its shape.

    The element type is whatever scalar the caller puts in (SoftFloat,
    FixedPoint, float, Fraction); operations that need arithmetic live in
    the runtime, keyed by the backend configuration.
    """

    shape: Tuple[int, ...]
    data: list

    def __post_init__(self) -> None:
        self.shape = tuple(int(d) for d in self.shape)
        if any(d < 1 for d in self.shape):
            raise ValueError(f"shape dims must be >= 1, got {self.shape}")
        if len(self.data) != self.size:
            raise ValueError(
                f"payload length {len(self.data)} does not match shape {self.shape}"
            )

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def rank(self) -> int:
        return len(self.shape)

    @classmethod
    def filled(cls, shape: Sequence[int], value: Any) -> "Tensor":
        return cls(tuple(shape), [value] * math.prod(shape))

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        shape = tuple(int(d) for d in shape)
        if math.prod(shape) != self.size:
            raise ValueError(f"cannot reshape {self.shape} to {shape}")
        return Tensor(shape, self.data)

    def __getitem__(self, flat_index: int):
        return self.data[flat_index]

    def at(self, *idx: int):
        return self.data[flat_offset(self.shape, idx)]

    def map(self, fn: Callable[[Any], Any]) -> "Tensor":
        return Tensor(self.shape, [fn(v) for v in self.data])

    def __iter__(self) -> Iterator:
        return iter(self.data)

    def __repr__(self) -> str:
        head = ", ".join(repr(v) for v in self.data[:4])
        tail = ", ..." if self.size > 4 else ""
        return f"Tensor(shape={self.shape}, [{head}{tail}])"


def flat_offset(shape: Sequence[int], idx: Sequence[int]) -> int:
    """Row-major offset of a multi-index, bounds-checked."""
    if len(idx) != len(shape):
        raise ValueError(f"index rank {len(idx)} != tensor rank {len(shape)}")
    off = 0
    for d, (i, n) in enumerate(zip(idx, shape)):
        if not 0 <= i < n:
            raise IndexError(f"index {i} out of range for dim {d} of extent {n}")
        off = off * n + i
    return off


def broadcast_shapes(a: Sequence[int], b: Sequence[int]) -> Tuple[int, ...]:
    """Right-aligned broadcasting of two shapes; dim 1 stretches."""
    out = []
    for da, db in zip(_padded(a, b), _padded(b, a)):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ValueError(f"cannot broadcast shapes {tuple(a)} and {tuple(b)}")
    return tuple(out)


def _padded(shape: Sequence[int], other: Sequence[int]) -> Tuple[int, ...]:
    pad = max(len(other) - len(shape), 0)
    return (1,) * pad + tuple(shape)


def broadcast_index(out_idx: Sequence[int], in_shape: Sequence[int]) -> Tuple[int, ...]:
    """Map an output multi-index back to an input index under broadcasting."""
    offset = len(out_idx) - len(in_shape)
    return tuple(
        0 if in_shape[k] == 1 else out_idx[k + offset] for k in range(len(in_shape))
    )
