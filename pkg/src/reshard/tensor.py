"""Dense byte-payload tensors and the axis-aligned range algebra built on them.

Payloads are opaque row-major little-endian byte strings. Nothing here ever
interprets element values, so equality is byte equality and every dtype is
handled the same way: as fixed-width byte cells.
"""
from __future__ import annotations

import enum
import itertools
import math
import re
import struct
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (
    DtypeMismatch,
    InvalidSplitPoint,
    MalformedTensor,
    RangeOutOfBounds,
    RankMismatch,
    ShapeMismatch,
    TilingGap,
    TilingOverlap,
)

PTX_MAGIC = b"PTX1"


class Dtype(enum.Enum):
    F32 = 0
    F16 = 1
    I64 = 2
    U8 = 3

    @property
    def code(self) -> int:
        return self.value

    @property
    def width(self) -> int:
        return _WIDTHS[self]

    @property
    def numpy(self) -> np.dtype:
        return np.dtype(_NUMPY[self])

    @classmethod
    def parse(cls, name) -> "Dtype":
        if isinstance(name, Dtype):
            return name
        try:
            return cls[str(name).upper()]
        except KeyError:
            raise ValueError(f"unknown dtype {name!r}") from None

    @classmethod
    def from_numpy(cls, dt) -> "Dtype":
        dt = np.dtype(dt).newbyteorder("<") if np.dtype(dt).byteorder == ">" else np.dtype(dt)
        for k, v in _NUMPY.items():
            if np.dtype(v) == dt:
                return k
        raise ValueError(f"unsupported numpy dtype {dt}")


_WIDTHS = {Dtype.F32: 4, Dtype.F16: 2, Dtype.I64: 8, Dtype.U8: 1}
_NUMPY = {Dtype.F32: "<f4", Dtype.F16: "<f2", Dtype.I64: "<i8", Dtype.U8: "u1"}


def numel(shape: Sequence[int]) -> int:
    return math.prod(shape)


@dataclass(frozen=True)
class Tensor:
    dtype: Dtype
    shape: tuple
    payload: bytes

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        object.__setattr__(self, "shape", shape)
        if not shape:
            raise ShapeMismatch("rank-0 tensors are not supported")
        if any(s <= 0 for s in shape):
            raise ShapeMismatch(f"extents must be positive, got {shape}")
        if not isinstance(self.payload, bytes):
            object.__setattr__(self, "payload", bytes(self.payload))
        expected = numel(shape) * self.dtype.width
        if len(self.payload) != expected:
            raise ShapeMismatch(
                f"payload is {len(self.payload)} bytes, shape {shape} needs {expected}"
            )

    @property
    def rank(self) -> int:
        return len(self.shape)

    @property
    def nbytes(self) -> int:
        return len(self.payload)

    def full_range(self) -> "Range":
        return Range.full(self.shape)

    def to_numpy(self) -> np.ndarray:
        return np.frombuffer(self.payload, dtype=self.dtype.numpy).reshape(self.shape)

    @classmethod
    def from_numpy(cls, arr) -> "Tensor":
        arr = np.asarray(arr)
        dtype = Dtype.from_numpy(arr.dtype)
        arr = np.ascontiguousarray(arr, dtype=dtype.numpy)
        return cls(dtype, arr.shape, arr.tobytes())

    def _cells(self) -> np.ndarray:
        # one uint8 row per element keeps slicing dtype-agnostic
        return np.frombuffer(self.payload, dtype=np.uint8).reshape(self.shape + (self.dtype.width,))

    def __repr__(self):
        return f"Tensor({self.dtype.name}, {list(self.shape)}, {self.nbytes}B)"


@dataclass(frozen=True, order=True)
class Range:
    """Per-dimension half-open intervals ``[lo, hi)``."""

    bounds: tuple

    def __post_init__(self):
        b = tuple((int(lo), int(hi)) for lo, hi in self.bounds)
        object.__setattr__(self, "bounds", b)
        for lo, hi in b:
            if not (0 <= lo < hi):
                raise RangeOutOfBounds(f"invalid interval [{lo}:{hi})")

    @classmethod
    def full(cls, shape: Sequence[int]) -> "Range":
        return cls(tuple((0, s) for s in shape))

    @classmethod
    def of(cls, *pairs) -> "Range":
        return cls(tuple(pairs))

    @property
    def rank(self) -> int:
        return len(self.bounds)

    @property
    def lows(self) -> tuple:
        return tuple(lo for lo, _ in self.bounds)

    @property
    def shape(self) -> tuple:
        return tuple(hi - lo for lo, hi in self.bounds)

    @property
    def numel(self) -> int:
        return numel(self.shape)

    def check_within(self, shape: Sequence[int]) -> None:
        if len(shape) != self.rank:
            raise RankMismatch(f"range rank {self.rank} vs tensor rank {len(shape)}")
        for (lo, hi), ext in zip(self.bounds, shape):
            if hi > ext:
                raise RangeOutOfBounds(f"range {self} exceeds shape {list(shape)}")

    def contains(self, other: "Range") -> bool:
        return all(
            lo <= olo and ohi <= hi for (lo, hi), (olo, ohi) in zip(self.bounds, other.bounds)
        )

    def intersect(self, other: "Range") -> Optional["Range"]:
        out = []
        for (lo, hi), (olo, ohi) in zip(self.bounds, other.bounds):
            a, b = max(lo, olo), min(hi, ohi)
            if a >= b:
                return None
            out.append((a, b))
        return Range(tuple(out))

    def rebase(self, origin: Sequence[int]) -> "Range":
        """Express this range relative to ``origin`` (subtract it)."""
        return Range(tuple((lo - o, hi - o) for (lo, hi), o in zip(self.bounds, origin)))

    def offset(self, by: Sequence[int]) -> "Range":
        return Range(tuple((lo + o, hi + o) for (lo, hi), o in zip(self.bounds, by)))

    def to_slices(self) -> tuple:
        return tuple(slice(lo, hi) for lo, hi in self.bounds)

    def __str__(self):
        return "[" + ",".join(f"{lo}:{hi}" for lo, hi in self.bounds) + "]"

    @classmethod
    def parse(cls, text: str, shape: Optional[Sequence[int]] = None) -> "Range":
        spec = parse_range_spec(text)
        if shape is None:
            if any(lo is None or hi is None for lo, hi in spec):
                raise ValueError(f"open bounds in {text!r} need a shape to resolve")
            return cls(spec)
        return resolve_spec(spec, shape)


_SPEC_RE = re.compile(r"^\s*(-?\d*)\s*:\s*(-?\d*)\s*$")


def parse_range_spec(text: str) -> tuple:
    """Parse ``[:,2:4]`` style text into ``((None, None), (2, 4))``."""
    text = text.strip()
    if not (text.startswith("[") and text.endswith("]")):
        raise ValueError(f"range spec must be bracketed: {text!r}")
    body = text[1:-1]
    if not body.strip():
        raise ValueError("empty range spec")
    out = []
    for part in body.split(","):
        m = _SPEC_RE.match(part)
        if not m:
            raise ValueError(f"bad range component {part!r}")
        lo, hi = (int(g) if g else None for g in m.groups())
        if (lo is not None and lo < 0) or (hi is not None and hi < 0):
            raise ValueError(f"negative bound in {part!r}")
        out.append((lo, hi))
    return tuple(out)


def format_range_spec(spec) -> str:
    parts = []
    for lo, hi in spec:
        parts.append(f"{'' if lo is None else lo}:{'' if hi is None else hi}")
    return "[" + ",".join(parts) + "]"


def resolve_spec(spec, shape: Sequence[int]) -> Range:
    if len(spec) != len(shape):
        raise RankMismatch(f"range rank {len(spec)} vs tensor rank {len(shape)}")
    bounds = []
    for (lo, hi), ext in zip(spec, shape):
        lo = 0 if lo is None else lo
        hi = ext if hi is None else hi
        if not (0 <= lo < hi <= ext):
            raise RangeOutOfBounds(f"{format_range_spec(spec)} invalid for shape {list(shape)}")
        bounds.append((lo, hi))
    return Range(tuple(bounds))


def compose(outer: Range, inner: Range) -> Range:
    """Range of ``inner`` (relative to ``outer``) in ``outer``'s coordinates."""
    return inner.offset(outer.lows)


def slice_tensor(t: Tensor, r: Range) -> Tensor:
    r.check_within(t.shape)
    sub = t._cells()[r.to_slices()]
    return Tensor(t.dtype, r.shape, sub.tobytes())


def merge(parts: Iterable, target_shape: Sequence[int], origin: Optional[Sequence[int]] = None) -> Tensor:
    """Reassemble ``(Range, Tensor)`` parts that tile ``target_shape``.

    Part ranges are given in the coordinates of the target unless ``origin``
    is supplied, in which case they are rebased by it first.
    """
    parts = list(parts)
    target_shape = tuple(target_shape)
    if not parts:
        raise TilingGap("no parts to merge")
    dtype = parts[0][1].dtype
    placed = []
    for r, t in parts:
        if t.dtype != dtype:
            raise DtypeMismatch(f"{t.dtype.name} part among {dtype.name} parts")
        if origin is not None:
            r = r.rebase(origin)
        r.check_within(target_shape)
        if r.shape != t.shape:
            raise ShapeMismatch(f"part shape {list(t.shape)} does not match range {r}")
        placed.append((r, t))
    check_tiling([r for r, _ in placed], target_shape)
    out = np.empty(target_shape + (dtype.width,), dtype=np.uint8)
    for r, t in placed:
        out[r.to_slices()] = t._cells()
    return Tensor(dtype, target_shape, out.tobytes())


def check_tiling(ranges: Sequence[Range], shape: Sequence[int]) -> None:
    """Raise unless ``ranges`` partition the index space of ``shape``."""
    rs = sorted(ranges)
    for i, a in enumerate(rs):
        for b in rs[i + 1:]:
            if b.bounds[0][0] >= a.bounds[0][1]:
                break  # sorted by first dim: nothing later can overlap a
            if a.intersect(b) is not None:
                raise TilingOverlap(f"{a} overlaps {b}")
    covered = sum(r.numel for r in rs)
    if covered != numel(shape):
        raise TilingGap(f"ranges cover {covered} of {numel(shape)} elements")


@dataclass(frozen=True)
class SplitGrid:
    """Axis-aligned grid partition of a tensor's index space.

    ``splits[d]`` holds the interior split points of dimension ``d``.
    """

    shape: tuple
    splits: tuple

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        splits = tuple(tuple(int(p) for p in s) for s in self.splits)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "splits", splits)
        if len(splits) != len(shape):
            raise RankMismatch(f"grid rank {len(splits)} vs shape rank {len(shape)}")
        for d, (pts, ext) in enumerate(zip(splits, shape)):
            prev = 0
            for p in pts:
                if not (prev < p < ext):
                    raise InvalidSplitPoint(f"split point {p} invalid in dim {d} (extent {ext})")
                prev = p

    @classmethod
    def identity(cls, shape) -> "SplitGrid":
        return cls(tuple(shape), tuple(() for _ in shape))

    @classmethod
    def from_dict(cls, shape, splits: dict) -> "SplitGrid":
        per_dim = [()] * len(shape)
        for d, pts in splits.items():
            if not 0 <= d < len(shape):
                raise RankMismatch(f"dim {d} out of range for rank {len(shape)}")
            per_dim[d] = tuple(pts)
        return cls(tuple(shape), tuple(per_dim))

    @classmethod
    def even(cls, shape, dim: int, parts: int) -> "SplitGrid":
        ext = shape[dim]
        if ext % parts:
            raise InvalidSplitPoint(f"extent {ext} not divisible into {parts} parts")
        step = ext // parts
        return cls.from_dict(shape, {dim: range(step, ext, step)})

    @property
    def ncells(self) -> int:
        return math.prod(len(s) + 1 for s in self.splits)

    def intervals(self, dim: int) -> list:
        pts = (0,) + self.splits[dim] + (self.shape[dim],)
        return list(zip(pts[:-1], pts[1:]))

    def cells(self) -> list:
        return grid_cells(self.shape, self)

    def is_identity(self) -> bool:
        return all(not s for s in self.splits)

    def __str__(self):
        return "{" + ",".join(f"{d}:{list(s)}" for d, s in enumerate(self.splits) if s) + "}"


def grid_cells(shape, g: SplitGrid) -> list:
    """Cells of ``g`` as ranges, in lexicographic order."""
    if tuple(shape) != g.shape:
        raise ShapeMismatch(f"grid for {list(g.shape)} applied to {list(shape)}")
    per_dim = [g.intervals(d) for d in range(len(g.shape))]
    return [Range(tuple(c)) for c in itertools.product(*per_dim)]


def grid_refine(a: SplitGrid, b: SplitGrid) -> SplitGrid:
    """Common refinement: per-dimension union of split points."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"cannot refine grids over {list(a.shape)} and {list(b.shape)}")
    return SplitGrid(a.shape, tuple(tuple(sorted(set(x) | set(y))) for x, y in zip(a.splits, b.splits)))


def grid_from_ranges(shape, ranges: Iterable[Range]) -> SplitGrid:
    """Smallest grid whose cell boundaries include every range boundary.

    The caller decides whether the ranges must equal the grid's cells.
    """
    shape = tuple(shape)
    pts = [set() for _ in shape]
    for r in ranges:
        r.check_within(shape)
        for d, (lo, hi) in enumerate(r.bounds):
            pts[d].update((lo, hi))
    return SplitGrid(shape, tuple(tuple(sorted(p - {0, ext})) for p, ext in zip(pts, shape)))


def cells_within(g: SplitGrid, r: Range) -> list:
    """Cells of ``g`` lying inside ``r`` (``r`` must be aligned to ``g``)."""
    per_dim = []
    for d, (lo, hi) in enumerate(r.bounds):
        iv = [(a, b) for a, b in g.intervals(d) if lo <= a and b <= hi]
        per_dim.append(iv)
    return [Range(tuple(c)) for c in itertools.product(*per_dim)]


# PTX1 file format: magic, u8 dtype, u8 rank, rank x u64 extents, payload
def to_ptx(t: Tensor) -> bytes:
    head = PTX_MAGIC + struct.pack("<BB", t.dtype.code, t.rank)
    head += struct.pack(f"<{t.rank}Q", *t.shape)
    return head + t.payload


def ptx_header_size(rank: int) -> int:
    return 6 + 8 * rank


def from_ptx(data: bytes) -> Tensor:
    t, used = read_ptx(data, 0)
    if used != len(data):
        raise MalformedTensor(f"{len(data) - used} trailing bytes after tensor")
    return t


def read_ptx(data: bytes, offset: int = 0) -> tuple:
    """Decode one PTX1 tensor at ``offset``; return ``(tensor, end_offset)``."""
    view = memoryview(data)
    if bytes(view[offset:offset + 4]) != PTX_MAGIC:
        raise MalformedTensor("bad magic")
    if len(view) < offset + 6:
        raise MalformedTensor("truncated header")
    code, rank = struct.unpack_from("<BB", view, offset + 4)
    try:
        dtype = Dtype(code)
    except ValueError:
        raise MalformedTensor(f"unknown dtype code {code}") from None
    pos = offset + 6
    if len(view) < pos + 8 * rank:
        raise MalformedTensor("truncated extents")
    shape = struct.unpack_from(f"<{rank}Q", view, pos)
    pos += 8 * rank
    n = numel(shape) * dtype.width
    if len(view) < pos + n:
        raise MalformedTensor("truncated payload")
    try:
        t = Tensor(dtype, shape, bytes(view[pos:pos + n]))
    except ShapeMismatch as e:
        raise MalformedTensor(str(e)) from None
    return t, pos + n


def arange(shape, dtype: Dtype = Dtype.F32) -> Tensor:
    """Tensor holding 0, 1, 2, ... in row-major order (test and demo helper)."""
    return Tensor.from_numpy(np.arange(numel(shape)).astype(dtype.numpy).reshape(shape))


def random_tensor(shape, dtype: Dtype, rng: np.random.Generator) -> Tensor:
    n = numel(shape) * dtype.width
    return Tensor(dtype, tuple(shape), rng.integers(0, 256, size=n, dtype=np.uint8).tobytes())
