"""Compressed sparse row matrices with a fixed pattern and mutable values.

Every sparse operator in this package (stiffness matrices, restrictions,
interpolation, interface blocks) is carried by :class:`CsrMatrix`.  The
pattern is canonical: column indices sorted and unique within each row, and
explicitly stored zeros are kept, so that assembled operators retain the
full adjacency structure even where entries cancel numerically.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


@dataclass
class CsrMatrix:
    """Sparse matrix in CSR layout.

    Attributes
    ----------
    n_rows, n_cols : int
        Matrix dimensions.
    row_ptr : ndarray of int64, shape (n_rows + 1,)
        Offsets into ``col_idx``/``values``; ``row_ptr[n_rows]`` equals nnz.
    col_idx : ndarray of int64, shape (nnz,)
        Column indices, sorted and unique within each row.
    values : ndarray of float64, shape (nnz,)
        Entry values; mutable, pattern is not.
    """

    n_rows: int
    n_cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    @classmethod
    def from_scipy(cls, m) -> "CsrMatrix":
        m = sp.csr_matrix(m)
        m.sort_indices()
        return cls(
            int(m.shape[0]),
            int(m.shape[1]),
            m.indptr.astype(np.int64),
            m.indices.astype(np.int64),
            np.asarray(m.data, dtype=np.float64),
        )

    @classmethod
    def from_coo(cls, rows, cols, vals, shape) -> "CsrMatrix":
        """Build from triplets; duplicates are summed, explicit zeros kept."""
        m = sp.coo_matrix(
            (np.asarray(vals, dtype=np.float64), (rows, cols)), shape=shape
        ).tocsr()
        m.sort_indices()
        return cls.from_scipy(m)

    @classmethod
    def eye(cls, n: int) -> "CsrMatrix":
        return cls.from_scipy(sp.eye(n, format="csr"))

    def to_scipy(self) -> sp.csr_matrix:
        """Zero-copy view as a scipy CSR matrix."""
        return sp.csr_matrix(
            (self.values, self.col_idx, self.row_ptr),
            shape=(self.n_rows, self.n_cols),
        )

    @property
    def nnz(self) -> int:
        return int(self.row_ptr[-1])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.to_scipy() @ x

    def toarray(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def transpose(self) -> "CsrMatrix":
        return CsrMatrix.from_scipy(self.to_scipy().T.tocsr())

    def copy(self) -> "CsrMatrix":
        return CsrMatrix(
            self.n_rows,
            self.n_cols,
            self.row_ptr.copy(),
            self.col_idx.copy(),
            self.values.copy(),
        )

    def with_values(self, values: np.ndarray) -> "CsrMatrix":
        """Same pattern, new values (shape must match nnz)."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise ValueError(
                f"value array shape {values.shape} does not match nnz {self.nnz}"
            )
        return CsrMatrix(self.n_rows, self.n_cols, self.row_ptr, self.col_idx, values)

    def entry(self, i: int, j: int) -> float:
        """Value at (i, j); 0.0 if outside the pattern."""
        lo, hi = self.row_ptr[i], self.row_ptr[i + 1]
        k = np.searchsorted(self.col_idx[lo:hi], j)
        if k < hi - lo and self.col_idx[lo + k] == j:
            return float(self.values[lo + k])
        return 0.0

    def find_entries(self, rows, cols) -> np.ndarray:
        """Positions in ``values`` of pattern entries (rows[k], cols[k]).

        Raises if any requested pair is outside the pattern.
        """
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        lo = self.row_ptr[rows]
        hi = self.row_ptr[rows + 1]
        pos = np.empty(rows.shape[0], dtype=np.int64)
        for k in range(rows.shape[0]):
            seg = self.col_idx[lo[k] : hi[k]]
            j = np.searchsorted(seg, cols[k])
            if j >= seg.shape[0] or seg[j] != cols[k]:
                raise ValueError(f"entry ({rows[k]}, {cols[k]}) not in pattern")
            pos[k] = lo[k] + j
        return pos

    def check(self) -> None:
        """Validate the CSR structural invariants; raises on violation."""
        if self.row_ptr.shape != (self.n_rows + 1,):
            raise ValueError("row_ptr has wrong length")
        if self.row_ptr[0] != 0 or np.any(np.diff(self.row_ptr) < 0):
            raise ValueError("row_ptr not monotone from 0")
        if self.row_ptr[-1] != self.col_idx.shape[0]:
            raise ValueError("row_ptr[-1] != nnz")
        if self.col_idx.shape != self.values.shape:
            raise ValueError("col_idx / values length mismatch")
        if self.nnz and (self.col_idx.min() < 0 or self.col_idx.max() >= self.n_cols):
            raise ValueError("column index out of range")
        for i in range(self.n_rows):
            seg = self.col_idx[self.row_ptr[i] : self.row_ptr[i + 1]]
            if seg.shape[0] > 1 and np.any(np.diff(seg) <= 0):
                raise ValueError(f"row {i}: columns not sorted/unique")

    def same_pattern(self, other: "CsrMatrix") -> bool:
        return (
            self.shape == other.shape
            and np.array_equal(self.row_ptr, other.row_ptr)
            and np.array_equal(self.col_idx, other.col_idx)
        )


def pattern_rows(m: CsrMatrix) -> np.ndarray:
    """Row index of every stored entry, aligned with ``values``."""
    return np.repeat(np.arange(m.n_rows, dtype=np.int64), np.diff(m.row_ptr))
