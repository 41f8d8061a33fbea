"""Count sketch over real-valued vectors.

An r x c table of float64 counters with per-row sign and bucket hashes.
Inserting (index, value) adds sign_j(index) * value to cell
(j, bucket_j(index)) in every row j. The table is linear in the input
vector, so sketches from different workers can be summed cell-wise and
the result is the sketch of the summed vector. A point query returns
the median over rows of sign_j(i) * table[j, bucket_j(i)], which for
random inputs is within O(norm(x) / sqrt(c)) of the true coordinate
with failure probability decaying in r.

Hashes are derived from (seed, row, index) with a splitmix64-style
avalanche mixer: every worker that shares the config computes the same
hash family, so sketches built independently are mergeable. The bucket
comes from the high 32 bits of the mixed word, the sign from bit 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
import struct

import numpy as np

_MASK64 = (1 << 64) - 1
_ROW_SALT = 0x9E3779B97F4A7C15  # golden-ratio increment, salts the row key
_IDX_SPREAD = 0xC2B2AE3D27D4EB4F  # odd constant spreading small indices


class IncompatibleSketchError(ValueError):
    """Raised when two sketches with different configs are combined."""


@dataclass(frozen=True)
class SketchConfig:
    """Shape and hash-seed agreement for a family of mergeable sketches."""

    rows: int
    cols: int
    seed: int
    dim: int

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1 or self.dim < 1:
            raise ValueError(
                f"rows, cols, dim must be >= 1, got ({self.rows}, {self.cols}, {self.dim})"
            )
        if not 0 <= self.seed <= _MASK64:
            raise ValueError(f"seed must fit in 64 bits, got {self.seed}")

    @property
    def size(self) -> int:
        """Number of table cells, the |S| term in communication accounting."""
        return self.rows * self.cols


def _mix64_int(z: int) -> int:
    """Scalar splitmix64 finalizer on a 64-bit word."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _mix64(z: np.ndarray) -> np.ndarray:
    """Vectorized splitmix64 finalizer; z must be uint64 (wraps mod 2^64)."""
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _row_key(config: SketchConfig, row: int) -> int:
    return _mix64_int(config.seed ^ (((row + 1) * _ROW_SALT) & _MASK64))


def _cell_hash(config: SketchConfig, row: int, indices: np.ndarray) -> np.ndarray:
    """Mixed 64-bit word for each index in one row (uint64 array in, uint64 out)."""
    spread = (indices + np.uint64(1)) * np.uint64(_IDX_SPREAD)
    return _mix64(spread ^ np.uint64(_row_key(config, row)))


def _check_row_index(config: SketchConfig, row: int, index: int) -> None:
    if not 0 <= row < config.rows:
        raise ValueError(f"row {row} out of range [0, {config.rows})")
    if not 0 <= index < config.dim:
        raise ValueError(f"index {index} out of range [0, {config.dim})")


def bucket_hash(config: SketchConfig, row: int, index: int) -> int:
    """Bucket in [0, cols) for a coordinate in one row."""
    _check_row_index(config, row, index)
    h = _cell_hash(config, row, np.array([index], dtype=np.uint64))[0]
    return int(h >> np.uint64(32)) % config.cols


def sign_hash(config: SketchConfig, row: int, index: int) -> int:
    """Sign in {-1, +1} for a coordinate in one row."""
    _check_row_index(config, row, index)
    h = _cell_hash(config, row, np.array([index], dtype=np.uint64))[0]
    return 1 if (int(h) & 1) == 0 else -1


@lru_cache(maxsize=2)
def _hash_tables(config: SketchConfig) -> tuple[np.ndarray, np.ndarray]:
    """Precomputed (rows x dim) bucket and sign arrays for a config.

    Cached per config so the workers of one simulated cluster share a
    single table. Read-only after construction.
    """
    all_idx = np.arange(config.dim, dtype=np.uint64)
    buckets = np.empty((config.rows, config.dim), dtype=np.int64)
    signs = np.empty((config.rows, config.dim), dtype=np.float64)
    for j in range(config.rows):
        h = _cell_hash(config, j, all_idx)
        buckets[j] = ((h >> np.uint64(32)) % np.uint64(config.cols)).astype(np.int64)
        signs[j] = np.where((h & np.uint64(1)) == 0, 1.0, -1.0)
    buckets.setflags(write=False)
    signs.setflags(write=False)
    return buckets, signs


class CountSketch:
    """One r x c table plus the config that defines its hash family."""

    __slots__ = ("config", "table")

    def __init__(self, config: SketchConfig, table: np.ndarray | None = None):
        if table is None:
            table = np.zeros((config.rows, config.cols), dtype=np.float64)
        else:
            table = np.asarray(table, dtype=np.float64)
            if table.shape != (config.rows, config.cols):
                raise ValueError(
                    f"table shape {table.shape} does not match config "
                    f"({config.rows}, {config.cols})"
                )
        self.config = config
        self.table = table

    def copy(self) -> "CountSketch":
        return CountSketch(self.config, self.table.copy())

    def accumulate(self, index: int, value: float) -> "CountSketch":
        """Add one (index, value) update; touches exactly one cell per row.

        Zero-valued updates are no-ops (identical table, less work).
        """
        _check_row_index(self.config, 0, index)
        if not np.isfinite(value):
            raise ValueError(f"value must be finite, got {value}")
        if value == 0.0:
            return self
        buckets, signs = _hash_tables(self.config)
        rows = np.arange(self.config.rows)
        self.table[rows, buckets[:, index]] += signs[:, index] * value
        return self

    def estimate(self, index: int) -> float:
        """Median-of-rows point query for one coordinate."""
        _check_row_index(self.config, 0, index)
        buckets, signs = _hash_tables(self.config)
        rows = np.arange(self.config.rows)
        vals = signs[:, index] * self.table[rows, buckets[:, index]]
        return float(np.median(vals))

    def estimate_all(self) -> np.ndarray:
        """Point-query every coordinate; O(dim * rows)."""
        buckets, signs = _hash_tables(self.config)
        vals = signs * np.take_along_axis(self.table, buckets, axis=1)
        return np.median(vals, axis=0)

    def heavy_candidates(self, m: int) -> np.ndarray:
        """Indices of the m largest |estimate|, ties broken by lower index.

        Queries all dim coordinates; at the vector sizes this library
        targets that is cheaper than maintaining a heap during insertion.
        """
        if not 1 <= m <= self.config.dim:
            raise ValueError(f"m must be in [1, {self.config.dim}], got {m}")
        est = self.estimate_all()
        order = np.lexsort((np.arange(self.config.dim), -np.abs(est)))
        return order[:m].copy()

    def to_bytes(self) -> bytes:
        """Wire format: 4 little-endian u64 (rows, cols, seed, dim), then
        rows*cols little-endian f64 row-major."""
        c = self.config
        header = struct.pack("<QQQQ", c.rows, c.cols, c.seed, c.dim)
        return header + self.table.astype("<f8", copy=False).tobytes(order="C")

    @classmethod
    def from_bytes(cls, data: bytes) -> "CountSketch":
        rows, cols, seed, dim = struct.unpack_from("<QQQQ", data, 0)
        config = SketchConfig(rows=rows, cols=cols, seed=seed, dim=dim)
        expected = 32 + rows * cols * 8
        if len(data) != expected:
            raise ValueError(f"expected {expected} bytes, got {len(data)}")
        table = np.frombuffer(data, dtype="<f8", offset=32).reshape(rows, cols)
        return cls(config, table.astype(np.float64))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CountSketch):
            return NotImplemented
        return self.config == other.config and np.array_equal(self.table, other.table)


def sketch_vector(config: SketchConfig, vector: np.ndarray) -> CountSketch:
    """Sketch a dense vector; equals a fresh sketch with accumulate applied
    to every nonzero coordinate, in index order."""
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (config.dim,):
        raise ValueError(f"vector length {vector.shape} does not match dim {config.dim}")
    if not np.all(np.isfinite(vector)):
        raise ValueError("vector must be finite")
    sk = CountSketch(config)
    (nz,) = np.nonzero(vector)
    if nz.size == 0:
        return sk
    buckets, signs = _hash_tables(config)
    vals = vector[nz]
    for j in range(config.rows):
        # unbuffered scatter-add in ascending index order, so the cell sums
        # are bit-identical to a python loop of accumulate()
        np.add.at(sk.table[j], buckets[j, nz], signs[j, nz] * vals)
    return sk


def merge(a: CountSketch, b: CountSketch) -> CountSketch:
    """Cell-wise sum of two sketches built with identical configs."""
    if a.config != b.config:
        raise IncompatibleSketchError(
            f"cannot merge sketches with configs {a.config} and {b.config}"
        )
    return CountSketch(a.config, a.table + b.table)


def scale(sketch: CountSketch, factor: float) -> CountSketch:
    """Every cell multiplied by factor (linearity: scale(S(x), a) = S(a*x))."""
    if not np.isfinite(factor):
        raise ValueError(f"factor must be finite, got {factor}")
    return CountSketch(sketch.config, sketch.table * factor)
