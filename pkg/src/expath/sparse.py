"""Row-compressed boolean matrices over entity indices.

Only set cardinalities matter for rule metrics, so every product is
binarized immediately: an entry is either present or absent.
"""

from __future__ import annotations

import numpy as np

# Upper bound on expanded (row, col) candidates materialized at once by ``matmul``.
_EXPAND_CHUNK = 4_000_000


class SparseBoolMatrix:
    """Boolean matrix in CSR layout with strictly increasing columns per row."""

    __slots__ = ("n_rows", "n_cols", "indptr", "indices")

    def __init__(self, n_rows: int, n_cols: int, indptr: np.ndarray, indices: np.ndarray):
        self.n_rows = int(n_rows)
        self.n_cols = int(n_cols)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)

    @classmethod
    def from_pairs(cls, rows, cols, n_rows: int, n_cols: int) -> "SparseBoolMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if rows.size:
            if rows.min() < 0 or rows.max() >= n_rows or cols.min() < 0 or cols.max() >= n_cols:
                raise IndexError("pair outside matrix bounds")
        keys = np.unique(rows * n_cols + cols)
        return cls._from_keys(keys, n_rows, n_cols)

    @classmethod
    def empty(cls, n_rows: int, n_cols: int) -> "SparseBoolMatrix":
        return cls(n_rows, n_cols, np.zeros(n_rows + 1, dtype=np.int64), np.zeros(0, dtype=np.int64))

    @classmethod
    def _from_keys(cls, keys: np.ndarray, n_rows: int, n_cols: int) -> "SparseBoolMatrix":
        # keys must be sorted and unique
        if n_cols == 0:
            return cls.empty(n_rows, n_cols)
        rows = keys // n_cols
        cols = keys - rows * n_cols
        counts = np.bincount(rows, minlength=n_rows)
        indptr = np.zeros(n_rows + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        return cls(n_rows, n_cols, indptr, cols)

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def keys(self) -> np.ndarray:
        """Row-major linear positions of set entries (sorted)."""
        rows = np.repeat(np.arange(self.n_rows, dtype=np.int64), np.diff(self.indptr))
        return rows * self.n_cols + self.indices

    def pairs(self) -> list[tuple[int, int]]:
        rows = np.repeat(np.arange(self.n_rows, dtype=np.int64), np.diff(self.indptr))
        return list(zip(rows.tolist(), self.indices.tolist()))

    def row(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def column(self, j: int) -> np.ndarray:
        rows = np.repeat(np.arange(self.n_rows, dtype=np.int64), np.diff(self.indptr))
        return rows[self.indices == j]

    def __contains__(self, ij) -> bool:
        i, j = ij
        r = self.row(i)
        k = np.searchsorted(r, j)
        return bool(k < r.size and r[k] == j)

    def transpose(self) -> "SparseBoolMatrix":
        rows = np.repeat(np.arange(self.n_rows, dtype=np.int64), np.diff(self.indptr))
        keys = np.sort(self.indices * self.n_rows + rows)
        return SparseBoolMatrix._from_keys(keys, self.n_cols, self.n_rows)

    @property
    def T(self) -> "SparseBoolMatrix":
        return self.transpose()

    def matmul(self, other: "SparseBoolMatrix") -> "SparseBoolMatrix":
        """binary(self @ other): (i, j) is set iff some k has self[i,k] and other[k,j]."""
        if self.n_cols != other.n_rows:
            raise ValueError(f"shape mismatch: {self.shape} @ {other.shape}")
        n_rows, n_cols = self.n_rows, other.n_cols
        if self.nnz == 0 or other.nnz == 0:
            return SparseBoolMatrix.empty(n_rows, n_cols)

        other_len = np.diff(other.indptr)
        # expanded size contributed by each stored entry of self
        entry_len = other_len[self.indices]
        entry_row = np.repeat(np.arange(n_rows, dtype=np.int64), np.diff(self.indptr))
        row_len = np.bincount(entry_row, weights=entry_len, minlength=n_rows).astype(np.int64)

        pieces = []
        start_row = 0
        while start_row < n_rows:
            stop_row = start_row + 1
            budget = row_len[start_row]
            while stop_row < n_rows and budget + row_len[stop_row] <= _EXPAND_CHUNK:
                budget += row_len[stop_row]
                stop_row += 1
            pieces.append(self._expand_rows(other, start_row, stop_row, entry_len))
            start_row = stop_row
        keys = np.concatenate(pieces) if pieces else np.zeros(0, dtype=np.int64)
        # chunks are row-ordered, so concatenated unique keys stay sorted
        return SparseBoolMatrix._from_keys(keys, n_rows, n_cols)

    def _expand_rows(self, other, start_row, stop_row, entry_len) -> np.ndarray:
        lo, hi = self.indptr[start_row], self.indptr[stop_row]
        if lo == hi:
            return np.zeros(0, dtype=np.int64)
        mids = self.indices[lo:hi]
        lens = entry_len[lo:hi]
        total = int(lens.sum())
        if total == 0:
            return np.zeros(0, dtype=np.int64)
        src_rows = np.repeat(
            np.arange(start_row, stop_row, dtype=np.int64), np.diff(self.indptr[start_row:stop_row + 1])
        )
        out_rows = np.repeat(src_rows, lens)
        # gather concatenated row segments of `other`
        seg_start = other.indptr[mids]
        offsets = np.repeat(seg_start - (np.cumsum(lens) - lens), lens)
        cols = other.indices[offsets + np.arange(total, dtype=np.int64)]
        return np.unique(out_rows * other.n_cols + cols)

    def and_count(self, other: "SparseBoolMatrix") -> int:
        """Number of positions set in both matrices."""
        if self.shape != other.shape:
            raise ValueError(f"shape mismatch: {self.shape} vs {other.shape}")
        return int(np.intersect1d(self.keys(), other.keys(), assume_unique=True).size)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=bool)
        rows = np.repeat(np.arange(self.n_rows), np.diff(self.indptr))
        out[rows, self.indices] = True
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseBoolMatrix):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
        )

    def __repr__(self) -> str:
        return f"SparseBoolMatrix(shape={self.shape}, nnz={self.nnz})"
