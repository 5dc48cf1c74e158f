"""Count-min sketch over 64-bit item ids.

A sketch is a ``depth x width`` array of 32-bit counters. Row ``j`` hashes an
item with its own keyed 64-bit mixer and increments one counter; a query
returns the minimum over rows. Estimates never undercount, and with
probability ``1 - delta`` overcount by at most ``epsilon`` times the total
number of updates.

Dimensions follow the usual closed form::

    depth = ceil(ln(capacity_hint / delta))
    width = ceil(e / epsilon)

All cell arithmetic wraps modulo 2**32 so that blinded and plain sketches share
one representation and additive masks cancel exactly.

Binary layout (little-endian)::

    offset size field
    0      4    magic b"CMSK"
    4      2    format version (1)
    6      2    flags (0)
    8      8    epsilon   (float64)
    16     8    delta     (float64)
    24     8    capacity_hint (uint64)
    32     4    depth (uint32)
    36     4    width (uint32)
    40     8    seed (uint64)
    48     4*depth*width  cells, uint32, row-major
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import (
    IncompatibleSketchError,
    InvalidParameterError,
    MalformedHeaderError,
    TruncatedPayloadError,
)

MASK64 = (1 << 64) - 1
CELL_BYTES = 4
DEFAULT_CAPACITY = 100_000

FORMAT_VERSION = 1
_MAGIC = b"CMSK"
_HEADER = struct.Struct("<4sHHddQIIQ")
HEADER_SIZE = _HEADER.size

_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    """splitmix64 finalizer on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    # uint64 multiplication wraps, which is exactly the mod 2**64 we want
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= np.uint64(_M1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_M2)
    z ^= z >> np.uint64(31)
    return z


def derive_hash_seeds(seed: int, depth: int) -> tuple[int, ...]:
    """Row seeds from a splitmix64 stream started at ``seed``."""
    state = seed & MASK64
    out = []
    for _ in range(depth):
        state = (state + _GOLDEN) & MASK64
        out.append(mix64(state))
    return tuple(out)


def sketch_dimensions(epsilon: float, delta: float, capacity_hint: int) -> tuple[int, int]:
    _check_ranges(epsilon, delta, capacity_hint)
    depth = max(1, math.ceil(math.log(capacity_hint / delta)))
    width = max(1, math.ceil(math.e / epsilon))
    return depth, width


def _check_ranges(epsilon, delta, capacity_hint) -> None:
    if not 0.0 < epsilon < 1.0:
        raise InvalidParameterError(f"epsilon must be in (0, 1), got {epsilon}")
    if not 0.0 < delta < 1.0:
        raise InvalidParameterError(f"delta must be in (0, 1), got {delta}")
    if int(capacity_hint) != capacity_hint or capacity_hint < 1:
        raise InvalidParameterError(f"capacity_hint must be a positive integer, got {capacity_hint}")


@dataclass(frozen=True)
class SketchParams:
    """Shared sketch configuration. Two sketches merge iff their params are equal."""

    epsilon: float
    delta: float
    capacity_hint: int = DEFAULT_CAPACITY
    seed: int = 0
    depth: int = field(init=False)
    width: int = field(init=False)
    hash_seeds: tuple[int, ...] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        depth, width = sketch_dimensions(self.epsilon, self.delta, self.capacity_hint)
        if not 0 <= self.seed <= MASK64:
            raise InvalidParameterError("seed must fit in 64 bits")
        object.__setattr__(self, "capacity_hint", int(self.capacity_hint))
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "width", width)
        object.__setattr__(self, "hash_seeds", derive_hash_seeds(self.seed, depth))

    @property
    def cell_count(self) -> int:
        return self.depth * self.width

    @property
    def payload_bytes(self) -> int:
        return self.cell_count * CELL_BYTES

    def header_bytes(self) -> bytes:
        return _HEADER.pack(
            _MAGIC, FORMAT_VERSION, 0, self.epsilon, self.delta,
            self.capacity_hint, self.depth, self.width, self.seed,
        )

    def digest(self) -> bytes:
        """16-byte fingerprint used to tag blinded reports."""
        return hashlib.blake2b(self.header_bytes(), digest_size=16).digest()


class CountMinSketch:
    """Count-min sketch with uint32 cells (wrapping arithmetic).

    Items are non-negative integers below 2**64 (ad ids in practice).
    """

    __slots__ = ("params", "cells")

    def __init__(self, params: SketchParams, cells: np.ndarray | None = None):
        self.params = params
        if cells is None:
            cells = np.zeros((params.depth, params.width), dtype=np.uint32)
        else:
            cells = np.asarray(cells, dtype=np.uint32)
            if cells.size != params.cell_count:
                raise IncompatibleSketchError(
                    f"expected {params.cell_count} cells, got {cells.size}"
                )
            cells = cells.reshape(params.depth, params.width)
        self.cells = cells

    # -- hashing ---------------------------------------------------------------

    def _columns(self, item: int) -> list[int]:
        if not 0 <= item <= MASK64:
            raise ValueError(f"item must be a 64-bit unsigned integer, got {item}")
        w = self.params.width
        return [mix64(item ^ s) % w for s in self.params.hash_seeds]

    def columns_many(self, items) -> np.ndarray:
        """Column index of every item in every row, shape ``(depth, n)``."""
        x = np.asarray(items, dtype=np.uint64)
        w = np.uint64(self.params.width)
        return np.stack(
            [_mix64_array(x ^ np.uint64(s)) % w for s in self.params.hash_seeds]
        ).astype(np.intp)

    # -- update / query --------------------------------------------------------

    def update(self, item: int) -> None:
        for row, col in enumerate(self._columns(int(item))):
            # explicit wrap; numpy scalars would warn on overflow
            self.cells[row, col] = (int(self.cells[row, col]) + 1) & 0xFFFFFFFF

    def update_many(self, items: Iterable[int]) -> None:
        items = np.fromiter((int(i) for i in items), dtype=np.uint64) if not isinstance(
            items, np.ndarray) else items
        if len(items) == 0:
            return
        cols = self.columns_many(items)
        for row in range(self.params.depth):
            np.add.at(self.cells[row], cols[row], np.uint32(1))

    def query(self, item: int) -> int:
        return min(int(self.cells[row, col]) for row, col in enumerate(self._columns(int(item))))

    def query_many(self, items) -> np.ndarray:
        cols = self.columns_many(items)
        rows = np.arange(self.params.depth)[:, None]
        return self.cells[rows, cols].min(axis=0)

    @property
    def total(self) -> int:
        """Number of updates applied (mod 2**32); every row sums to it."""
        return int(self.cells[0].sum(dtype=np.uint64)) & 0xFFFFFFFF

    # -- algebra ---------------------------------------------------------------

    def merge(self, other: "CountMinSketch") -> "CountMinSketch":
        """Cell-wise sum mod 2**32."""
        if self.params != other.params:
            raise IncompatibleSketchError("cannot merge sketches with different params or seeds")
        return CountMinSketch(self.params, self.cells + other.cells)

    __add__ = merge

    def copy(self) -> "CountMinSketch":
        return CountMinSketch(self.params, self.cells.copy())

    def __eq__(self, other) -> bool:
        if not isinstance(other, CountMinSketch):
            return NotImplemented
        return self.params == other.params and np.array_equal(self.cells, other.cells)

    def __repr__(self) -> str:
        p = self.params
        return f"CountMinSketch(depth={p.depth}, width={p.width}, total={self.total})"

    # -- serialization -----------------------------------------------------------

    def to_bytes(self) -> bytes:
        return self.params.header_bytes() + self.cells.astype("<u4", copy=False).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CountMinSketch":
        params = parse_header(data)
        end = HEADER_SIZE + params.payload_bytes
        if len(data) < end:
            raise TruncatedPayloadError(
                f"payload needs {params.payload_bytes} bytes, got {len(data) - HEADER_SIZE}"
            )
        if len(data) > end:
            raise MalformedHeaderError(f"{len(data) - end} trailing bytes after payload")
        cells = np.frombuffer(data, dtype="<u4", count=params.cell_count, offset=HEADER_SIZE)
        return cls(params, cells.astype(np.uint32))


def parse_header(data: bytes) -> SketchParams:
    if len(data) < HEADER_SIZE:
        raise TruncatedPayloadError(f"need {HEADER_SIZE} header bytes, got {len(data)}")
    magic, version, flags, eps, delta, cap, depth, width, seed = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise MalformedHeaderError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION or flags != 0:
        raise MalformedHeaderError(f"unsupported format version {version} (flags {flags})")
    try:
        params = SketchParams(eps, delta, cap, seed)
    except InvalidParameterError as exc:
        raise MalformedHeaderError(str(exc)) from exc
    if (params.depth, params.width) != (depth, width):
        raise MalformedHeaderError(
            f"dimensions {depth}x{width} do not match parameters ({params.depth}x{params.width})"
        )
    return params


def new_sketch(epsilon: float, delta: float, capacity_hint: int = DEFAULT_CAPACITY,
               seed: int = 0) -> CountMinSketch:
    return CountMinSketch(SketchParams(epsilon, delta, capacity_hint, seed))


def merge(a: CountMinSketch, b: CountMinSketch) -> CountMinSketch:
    return a.merge(b)


def serialize(sketch: CountMinSketch) -> bytes:
    return sketch.to_bytes()


def deserialize(data: bytes) -> CountMinSketch:
    return CountMinSketch.from_bytes(data)
