"""Canonical sparse-matrix value type shared across the pipeline.

Matrices are stored in coordinate form, row-major sorted with duplicates
merged, so that two logically equal matrices serialize to identical bytes.
Heavy numerics (matvec, matmat) are delegated to scipy CSR views that are
built lazily and cached per dtype.
"""

from __future__ import annotations

import struct
from typing import Iterable

import numpy as np
from scipy import sparse as _sp

_HEADER = struct.Struct("<QQQ")
_RECORD_DTYPE = np.dtype([("row", "<u8"), ("col", "<u8"), ("value", "<f8")])


class SparseMatrix:
    """Immutable COO sparse matrix in canonical (row-major, merged) order.

    Parameters
    ----------
    rows, cols : array_like of int
        Coordinate index arrays of equal length.
    vals : array_like of float
        Entry values; duplicates at the same (row, col) are summed and
        exact zeros are dropped during canonicalization.
    shape : (int, int)
        Matrix dimensions.
    """

    __slots__ = ("rows", "cols", "vals", "shape", "_csr_cache")

    def __init__(self, rows, cols, vals, shape):
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        vals = np.asarray(vals, dtype=np.float64).ravel()
        if not (rows.size == cols.size == vals.size):
            raise ValueError(
                f"coordinate arrays disagree in length: {rows.size}, {cols.size}, {vals.size}"
            )
        n_rows, n_cols = int(shape[0]), int(shape[1])
        if n_rows < 0 or n_cols < 0:
            raise ValueError(f"invalid shape {shape!r}")
        if rows.size:
            if rows.min() < 0 or rows.max() >= n_rows:
                raise ValueError(f"row index out of range for shape {(n_rows, n_cols)}")
            if cols.min() < 0 or cols.max() >= n_cols:
                raise ValueError(f"col index out of range for shape {(n_rows, n_cols)}")
        # Canonicalize: row-major sort, merge duplicates, drop exact zeros.
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if rows.size:
            keys = rows * n_cols + cols
            uniq, inverse = np.unique(keys, return_inverse=True)
            merged = np.zeros(uniq.size, dtype=np.float64)
            np.add.at(merged, inverse, vals)
            rows = (uniq // n_cols).astype(np.int64)
            cols = (uniq % n_cols).astype(np.int64)
            vals = merged
            keep = vals != 0.0
            rows, cols, vals = rows[keep], cols[keep], vals[keep]
        rows.setflags(write=False)
        cols.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "vals", vals)
        object.__setattr__(self, "shape", (n_rows, n_cols))
        object.__setattr__(self, "_csr_cache", {})

    def __setattr__(self, name, value):
        raise AttributeError("SparseMatrix is immutable")

    # -- constructors -------------------------------------------------

    @classmethod
    def from_entries(cls, entries: Iterable[tuple[int, int, float]], shape) -> "SparseMatrix":
        entries = list(entries)
        if entries:
            rows, cols, vals = zip(*entries)
        else:
            rows, cols, vals = (), (), ()
        return cls(rows, cols, vals, shape)

    @classmethod
    def from_dense(cls, dense) -> "SparseMatrix":
        dense = np.asarray(dense, dtype=np.float64)
        if dense.ndim != 2:
            raise ValueError(f"expected a 2-D array, got shape {dense.shape}")
        rows, cols = np.nonzero(dense)
        return cls(rows, cols, dense[rows, cols], dense.shape)

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        idx = np.arange(n)
        return cls(idx, idx, np.ones(n), (n, n))

    # -- views and numerics -------------------------------------------

    @property
    def nnz(self) -> int:
        return int(self.vals.size)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=np.float64)
        out[self.rows, self.cols] = self.vals
        return out

    def to_csr(self, dtype=np.float64) -> _sp.csr_matrix:
        dtype = np.dtype(dtype)
        cached = self._csr_cache.get(dtype)
        if cached is None:
            cached = _sp.csr_matrix(
                (self.vals.astype(dtype), (self.rows, self.cols)), shape=self.shape
            )
            self._csr_cache[dtype] = cached
        return cached

    def matmul(self, dense: np.ndarray) -> np.ndarray:
        """Multiply by a dense (cols, k) array, preserving its dtype."""
        dense = np.asarray(dense)
        return self.to_csr(dense.dtype) @ dense

    def __matmul__(self, dense):
        return self.matmul(dense)

    def transpose(self) -> "SparseMatrix":
        return SparseMatrix(self.cols, self.rows, self.vals, (self.shape[1], self.shape[0]))

    @property
    def T(self) -> "SparseMatrix":
        return self.transpose()

    def __eq__(self, other):
        if not isinstance(other, SparseMatrix):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.rows, other.rows)
            and np.array_equal(self.cols, other.cols)
            and np.array_equal(self.vals, other.vals)
        )

    def __hash__(self):
        return hash((self.shape, self.rows.tobytes(), self.cols.tobytes(), self.vals.tobytes()))

    def __repr__(self):
        return f"SparseMatrix(shape={self.shape}, nnz={self.nnz})"

    # -- serialization -------------------------------------------------

    def to_bytes(self) -> bytes:
        """Little-endian binary form: header (rows, cols, nnz as u64) then
        nnz records of (u64 row, u64 col, f64 value) in canonical order."""
        header = _HEADER.pack(self.shape[0], self.shape[1], self.nnz)
        records = np.empty(self.nnz, dtype=_RECORD_DTYPE)
        records["row"] = self.rows
        records["col"] = self.cols
        records["value"] = self.vals
        return header + records.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "SparseMatrix":
        if len(data) < _HEADER.size:
            raise ValueError("truncated sparse matrix blob: missing header")
        n_rows, n_cols, nnz = _HEADER.unpack_from(data)
        expected = _HEADER.size + nnz * _RECORD_DTYPE.itemsize
        if len(data) != expected:
            raise ValueError(f"sparse matrix blob has {len(data)} bytes, expected {expected}")
        records = np.frombuffer(data, dtype=_RECORD_DTYPE, offset=_HEADER.size)
        return cls(
            records["row"].astype(np.int64),
            records["col"].astype(np.int64),
            records["value"],
            (n_rows, n_cols),
        )

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "SparseMatrix":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
