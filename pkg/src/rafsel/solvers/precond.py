"""Preconditioners: identity, weighted Jacobi, block Jacobi, SSOR and ILU(0).

Each preconditioner exposes ``apply(r) -> z`` computing ``z = M^{-1} r`` plus
two deterministic work counters (``setup_work`` and ``apply_work``, in
floating-point operations) used by the iteration-based ranking mode.
"""
from __future__ import annotations

import numpy as np

from ..exceptions import BreakdownError, ConfigError
from ..sparse import CsrMatrix
from . import kernels

PRECONDITIONERS = ("none", "jacobi", "bjacobi", "ssor", "ilu0")


class _CsrArrays:
    def __init__(self, A: CsrMatrix):
        self.n = A.order
        self.indptr = np.ascontiguousarray(A.row_offsets)
        self.indices = np.ascontiguousarray(A.col_indices)
        self.data = np.ascontiguousarray(A.values)
        self.nnz = A.nnz

    def diag_ptr(self):
        dp = kernels.diagonal_positions(self.indptr, self.indices)
        missing = np.flatnonzero(dp < 0)
        if missing.size:
            raise BreakdownError(f"row {missing[0]} has no stored diagonal entry")
        zero = np.flatnonzero(self.data[dp] == 0.0)
        if zero.size:
            raise BreakdownError(f"zero diagonal entry in row {zero[0]}")
        return dp


class Identity:
    kind = "none"

    def __init__(self, A: CsrMatrix):
        self.setup_work = 0
        self.apply_work = 0

    def apply(self, r):
        return r.copy()


class Jacobi:
    """z = omega * r / diag(A)."""

    kind = "jacobi"

    def __init__(self, A: CsrMatrix, omega: float = 1.0):
        arr = _CsrArrays(A)
        dp = arr.diag_ptr()
        self.scale = omega / arr.data[dp]
        self.setup_work = arr.n
        self.apply_work = arr.n

    def apply(self, r):
        return self.scale * r


class BlockJacobi:
    """Block-diagonal part of A in contiguous blocks of ``block_size`` rows."""

    kind = "bjacobi"

    def __init__(self, A: CsrMatrix, block_size: int = 4):
        if block_size < 1:
            raise ConfigError("block_size must be >= 1")
        n, bs = A.order, int(block_size)
        nb = -(-n // bs)
        blocks = np.zeros((nb, bs, bs))
        rows = A.row_indices()
        cols = A.col_indices
        same = rows // bs == cols // bs
        blocks[rows[same] // bs, rows[same] % bs, cols[same] % bs] = A.values[same]
        pad = nb * bs - n
        for t in range(pad):
            blocks[-1, bs - 1 - t, bs - 1 - t] = 1.0
        det = np.linalg.det(blocks)
        bad = np.flatnonzero(~np.isfinite(det) | (det == 0.0))
        if bad.size:
            raise BreakdownError(f"diagonal block {bad[0]} is singular")
        self.inv = np.linalg.inv(blocks)
        self.n, self.bs, self.pad = n, bs, pad
        self.setup_work = nb * 2 * bs ** 3
        self.apply_work = 2 * bs * n

    def apply(self, r):
        if self.pad:
            r = np.concatenate([r, np.zeros(self.pad)])
        z = np.einsum("bij,bj->bi", self.inv, r.reshape(-1, self.bs))
        return z.ravel()[: self.n]


class SSOR:
    kind = "ssor"

    def __init__(self, A: CsrMatrix, omega: float = 1.0):
        if not 0.0 < omega < 2.0:
            raise ConfigError("SSOR needs 0 < omega < 2")
        self.arr = arr = _CsrArrays(A)
        self.dp = arr.diag_ptr()
        self.omega = float(omega)
        self.setup_work = arr.n
        self.apply_work = 2 * arr.nnz + 4 * arr.n

    def apply(self, r):
        a = self.arr
        z = np.empty(a.n)
        return kernels.ssor_solve(a.indptr, a.indices, a.data, self.dp, self.omega,
                                  np.ascontiguousarray(r), z)


class ILU0:
    """Incomplete LU restricted to the sparsity pattern of A."""

    kind = "ilu0"

    def __init__(self, A: CsrMatrix):
        self.arr = arr = _CsrArrays(A)
        self.dp = arr.diag_ptr()
        lu, flops, bad = kernels.ilu0_factor(arr.indptr, arr.indices, arr.data, self.dp)
        if bad >= 0:
            raise BreakdownError(f"zero pivot in ILU(0) at row {bad}")
        if not np.all(np.isfinite(lu)):
            raise BreakdownError("non-finite ILU(0) factor")
        self.lu = lu
        self.setup_work = int(flops)
        self.apply_work = 2 * arr.nnz

    def factors(self):
        """Dense (L, U) for inspection; L has a unit diagonal."""
        n = self.arr.n
        full = np.zeros((n, n))
        rows = np.repeat(np.arange(n), np.diff(self.arr.indptr))
        full[rows, self.arr.indices] = self.lu
        L = np.tril(full, -1) + np.eye(n)
        return L, np.triu(full)

    def apply(self, r):
        a = self.arr
        z = np.empty(a.n)
        return kernels.ilu0_solve(a.indptr, a.indices, self.lu, self.dp,
                                  np.ascontiguousarray(r), z)


def build_preconditioner(A: CsrMatrix, kind: str, cfg=None):
    """Build the preconditioner ``kind`` for ``A``.

    ``cfg`` supplies ``omega`` and ``block_size`` (defaults 1.0 and 4).
    Raises :class:`BreakdownError` on a zero or missing diagonal.
    """
    omega = getattr(cfg, "omega", 1.0)
    block_size = getattr(cfg, "block_size", 4)
    if kind == "none":
        return Identity(A)
    if kind == "jacobi":
        return Jacobi(A, omega)
    if kind == "bjacobi":
        return BlockJacobi(A, block_size)
    if kind == "ssor":
        return SSOR(A, omega)
    if kind == "ilu0":
        return ILU0(A)
    raise ConfigError(f"unknown preconditioner {kind!r}")
