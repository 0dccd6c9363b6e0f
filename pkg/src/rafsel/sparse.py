"""CSR storage, Matrix Market I/O and block-partition statistics.

Everything downstream (features, solvers, generators) consumes
:class:`CsrMatrix`.  Instances are immutable: the index and value arrays are
flagged read-only on construction so a matrix can be shared freely between
threads and worker processes.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Iterable, TextIO

import numpy as np
import scipy.sparse as sp

from .exceptions import (
    BadResolution,
    DimensionError,
    EmptyMatrix,
    MalformedEntry,
    NonSquare,
    UnsupportedField,
)

# Values spanning more than this use the log2 branch of the block average.
LINEAR_RANGE_LIMIT = 255.0


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CsrMatrix:
    """Square matrix in compressed sparse row form.

    Within each row the column indices are strictly increasing.  Stored
    zeros are allowed until :meth:`canonicalize` drops them.
    """

    order: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        order = int(self.order)
        if order < 1:
            raise DimensionError(f"order must be positive, got {order}")
        object.__setattr__(self, "order", order)
        object.__setattr__(self, "row_offsets", _frozen(self.row_offsets, np.int64))
        object.__setattr__(self, "col_indices", _frozen(self.col_indices, np.int64))
        object.__setattr__(self, "values", _frozen(self.values, np.float64))
        ro, ci = self.row_offsets, self.col_indices
        if ro.shape != (order + 1,) or ro[0] != 0 or ro[-1] != ci.size:
            raise MalformedEntry("row_offsets inconsistent with stored entries")
        if ci.size != self.values.size:
            raise MalformedEntry("col_indices and values differ in length")
        if np.any(np.diff(ro) < 0):
            raise MalformedEntry("row_offsets must be non-decreasing")
        if ci.size:
            if ci.min() < 0 or ci.max() >= order:
                raise MalformedEntry("column index out of range")
            starts = np.zeros(ci.size, dtype=bool)
            starts[ro[:-1][ro[:-1] < ci.size]] = True
            if np.any((np.diff(ci) <= 0) & ~starts[1:]):
                raise MalformedEntry("column indices must increase within a row")

    # -- construction -----------------------------------------------------
    @classmethod
    def from_coo(cls, order, rows, cols, vals, *, sum_duplicates=True):
        """Build from triplets; duplicates are summed, rows sorted by column."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        if not (rows.shape == cols.shape == vals.shape):
            raise MalformedEntry("triplet arrays differ in length")
        if rows.size and (rows.min() < 0 or cols.min() < 0
                          or rows.max() >= order or cols.max() >= order):
            raise MalformedEntry("triplet index outside matrix bounds")
        perm = np.lexsort((cols, rows))
        rows, cols, vals = rows[perm], cols[perm], vals[perm]
        if rows.size:
            first = np.ones(rows.size, dtype=bool)
            first[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
            if not first.all():
                if not sum_duplicates:
                    raise MalformedEntry("duplicate entries")
                group = np.cumsum(first) - 1
                vals = np.bincount(group, weights=vals)
                rows, cols = rows[first], cols[first]
        offsets = np.zeros(order + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=order), out=offsets[1:])
        return cls(order, offsets, cols, vals)

    @classmethod
    def from_dense(cls, dense):
        dense = np.asarray(dense, dtype=np.float64)
        if dense.ndim != 2 or dense.shape[0] != dense.shape[1]:
            raise NonSquare(f"expected a square matrix, got shape {dense.shape}")
        r, c = np.nonzero(dense)
        return cls.from_coo(dense.shape[0], r, c, dense[r, c])

    @classmethod
    def from_scipy(cls, mat):
        mat = sp.csr_matrix(mat)
        if mat.shape[0] != mat.shape[1]:
            raise NonSquare(f"expected a square matrix, got shape {mat.shape}")
        mat.sum_duplicates()
        mat.sort_indices()
        return cls(mat.shape[0], mat.indptr, mat.indices, mat.data)

    # -- views ------------------------------------------------------------
    @property
    def nnz(self) -> int:
        return int(self.values.size)

    @property
    def shape(self):
        return (self.order, self.order)

    def row_indices(self) -> np.ndarray:
        return np.repeat(np.arange(self.order, dtype=np.int64), np.diff(self.row_offsets))

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (np.array(self.values), np.array(self.col_indices), np.array(self.row_offsets)),
            shape=self.shape,
        )

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.row_indices(), self.col_indices] = self.values
        return out

    def diagonal(self) -> np.ndarray:
        d = np.zeros(self.order)
        rows = self.row_indices()
        on = rows == self.col_indices
        d[rows[on]] = self.values[on]
        return d

    def transpose(self) -> "CsrMatrix":
        return CsrMatrix.from_coo(self.order, self.col_indices, self.row_indices(), self.values)

    # -- transformations ----------------------------------------------------
    def canonicalize(self) -> "CsrMatrix":
        """Return a copy without explicitly stored zeros."""
        keep = self.values != 0.0
        if keep.all():
            return self
        rows = self.row_indices()[keep]
        offsets = np.zeros(self.order + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=self.order), out=offsets[1:])
        return CsrMatrix(self.order, offsets, self.col_indices[keep], self.values[keep])

    def shift(self, c: float) -> "CsrMatrix":
        """Add ``c`` to every stored value, keeping the sparsity pattern."""
        return CsrMatrix(self.order, self.row_offsets, self.col_indices, self.values + c)

    def is_structurally_symmetric(self) -> bool:
        t = self.transpose()
        return (np.array_equal(t.row_offsets, self.row_offsets)
                and np.array_equal(t.col_indices, self.col_indices))

    def is_symmetric(self, tol: float = 0.0) -> bool:
        t = self.transpose()
        if not (np.array_equal(t.row_offsets, self.row_offsets)
                and np.array_equal(t.col_indices, self.col_indices)):
            return False
        return bool(np.all(np.abs(t.values - self.values) <= tol))

    def __eq__(self, other):
        if not isinstance(other, CsrMatrix):
            return NotImplemented
        return (self.order == other.order
                and np.array_equal(self.row_offsets, other.row_offsets)
                and np.array_equal(self.col_indices, other.col_indices)
                and np.array_equal(self.values, other.values))

    __hash__ = None

    def __repr__(self):
        return f"CsrMatrix(order={self.order}, nnz={self.nnz})"


# ---------------------------------------------------------------------------
# Matrix Market
# ---------------------------------------------------------------------------

def parse_matrix_market(text) -> CsrMatrix:
    """Parse a Matrix Market coordinate file.

    ``text`` may be a string or a text stream.  Only ``real``/``integer``
    fields and ``general``/``symmetric`` storage are accepted.  Duplicate
    coordinates are summed and the result is canonicalized.
    """
    stream: TextIO = io.StringIO(text) if isinstance(text, str) else text
    header = stream.readline()
    tokens = header.strip().split()
    if len(tokens) != 5 or tokens[0].lower() != "%%matrixmarket":
        raise MalformedEntry(f"missing %%MatrixMarket banner: {header.strip()!r}")
    obj, fmt, field, symmetry = (t.lower() for t in tokens[1:])
    if obj != "matrix" or fmt != "coordinate":
        raise MalformedEntry(f"only 'matrix coordinate' is supported, got {obj} {fmt}")
    if field not in ("real", "integer"):
        raise UnsupportedField(f"field {field!r} is not supported")
    if symmetry not in ("general", "symmetric"):
        raise UnsupportedField(f"symmetry {symmetry!r} is not supported")

    size_line = None
    for line in stream:
        s = line.strip()
        if s and not s.startswith("%"):
            size_line = s
            break
    if size_line is None:
        raise MalformedEntry("missing size line")
    try:
        nrows, ncols, nentries = (int(t) for t in size_line.split())
    except ValueError:
        raise MalformedEntry(f"bad size line {size_line!r}") from None
    if nrows != ncols:
        raise NonSquare(f"matrix is {nrows}x{ncols}")
    if nrows < 1:
        raise MalformedEntry("matrix order must be positive")

    rows = np.empty(nentries, dtype=np.int64)
    cols = np.empty(nentries, dtype=np.int64)
    vals = np.empty(nentries, dtype=np.float64)
    k = 0
    for line in stream:
        s = line.strip()
        if not s or s.startswith("%"):
            continue
        parts = s.split()
        if len(parts) != 3 or k >= nentries:
            raise MalformedEntry(f"bad entry line {s!r}")
        try:
            r, c, v = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError:
            raise MalformedEntry(f"bad entry line {s!r}") from None
        if not (1 <= r <= nrows and 1 <= c <= ncols):
            raise MalformedEntry(f"entry ({r}, {c}) outside {nrows}x{ncols}")
        rows[k], cols[k], vals[k] = r - 1, c - 1, v
        k += 1
    if k != nentries:
        raise MalformedEntry(f"expected {nentries} entries, found {k}")

    if symmetry == "symmetric":
        if np.any(cols > rows):
            raise MalformedEntry("symmetric storage must hold the lower triangle only")
        off = rows != cols
        rows, cols, vals = (np.concatenate([rows, cols[off]]),
                            np.concatenate([cols, rows[off]]),
                            np.concatenate([vals, vals[off]]))
    return CsrMatrix.from_coo(nrows, rows, cols, vals).canonicalize()


def read_matrix_market(path) -> CsrMatrix:
    with open(path, encoding="utf-8") as fh:
        return parse_matrix_market(fh)


def format_matrix_market(A: CsrMatrix, comments: Iterable[str] = ()) -> str:
    """Serialize as ``real general`` coordinate text (round-trips exactly)."""
    out = io.StringIO()
    out.write("%%MatrixMarket matrix coordinate real general\n")
    for c in comments:
        out.write(f"% {c}\n")
    out.write(f"{A.order} {A.order} {A.nnz}\n")
    rows = A.row_indices() + 1
    cols = A.col_indices + 1
    for r, c, v in zip(rows.tolist(), cols.tolist(), A.values.tolist()):
        out.write(f"{r} {c} {v!r}\n")
    return out.getvalue()


def write_matrix_market(path, A: CsrMatrix, comments: Iterable[str] = ()) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_matrix_market(A, comments))


# ---------------------------------------------------------------------------
# Value extrema and block statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ValueExtrema:
    min_val: float
    max_val: float

    @property
    def range(self) -> float:
        return self.max_val - self.min_val


def value_extrema(A: CsrMatrix) -> ValueExtrema:
    """Smallest and largest stored value; implicit zeros do not count."""
    if A.nnz == 0:
        raise EmptyMatrix("matrix has no stored entries")
    return ValueExtrema(float(A.values.min()), float(A.values.max()))


@dataclass(frozen=True, eq=False)
class BlockGrid:
    """Per-block nonzero counts and biased averages of an m x m partition.

    ``gamma`` holds NaN for empty blocks.
    """

    resolution: int
    block_order: int
    nnz: np.ndarray
    gamma: np.ndarray
    gamma_min: float
    gamma_max: float
    log_path: bool

    @property
    def occupied(self) -> np.ndarray:
        return self.nnz > 0


def block_index(order: int, m: int, idx: np.ndarray) -> np.ndarray:
    """Block coordinate of row/column ``idx`` under the floor partition."""
    return (np.asarray(idx, dtype=np.int64) * m) // order


def block_partition(A: CsrMatrix, m: int) -> BlockGrid:
    """Partition ``A`` into ``m``-by-``m`` blocks and average biased values.

    Entry (r, c) lands in block (floor(r*m/n), floor(c*m/n)).  Values are
    biased as ``a - min(A) + 1``; when the value range exceeds 255 each
    biased value is replaced by its log2 before averaging.
    """
    if int(m) != m or m < 1:
        raise BadResolution(f"resolution must be a positive integer, got {m}")
    m = int(m)
    A = A.canonicalize()
    ext = value_extrema(A)
    n = A.order
    bi = block_index(n, m, A.row_indices())
    bj = block_index(n, m, A.col_indices)
    flat = bi * m + bj

    biased = A.values - ext.min_val + 1.0
    log_path = ext.range > LINEAR_RANGE_LIMIT
    terms = np.log2(biased) if log_path else biased

    counts = np.bincount(flat, minlength=m * m)
    sums = np.bincount(flat, weights=terms, minlength=m * m)
    gamma = np.full(m * m, np.nan)
    occ = counts > 0
    gamma[occ] = sums[occ] / counts[occ]
    return BlockGrid(
        resolution=m,
        block_order=math.ceil(n / m),
        nnz=counts.reshape(m, m),
        gamma=gamma.reshape(m, m),
        gamma_min=float(gamma[occ].min()),
        gamma_max=float(gamma[occ].max()),
        log_path=bool(log_path),
    )
