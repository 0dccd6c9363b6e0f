"""Compiled CSR kernels: SpMV, ILU(0) factorization and triangular sweeps.

All kernels take raw CSR arrays (indptr, indices, data) with sorted column
indices and operate in double precision.  ``diag_ptr[i]`` is the position of
the diagonal entry of row ``i`` in ``indices`` (or -1 if it is not stored).
"""
import numpy as np
from numba import njit


@njit(cache=True)
def csr_matvec(indptr, indices, data, x, out):
    n = indptr.size - 1
    for i in range(n):
        s = 0.0
        for p in range(indptr[i], indptr[i + 1]):
            s += data[p] * x[indices[p]]
        out[i] = s
    return out


@njit(cache=True)
def diagonal_positions(indptr, indices):
    n = indptr.size - 1
    pos = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        for p in range(indptr[i], indptr[i + 1]):
            if indices[p] == i:
                pos[i] = p
                break
    return pos


@njit(cache=True)
def ilu0_factor(indptr, indices, data, diag_ptr):
    """In-place ILU(0) on a copy of ``data`` (IKJ ordering).

    Returns (lu, flops, bad_row).  ``bad_row`` is -1 on success, otherwise
    the first row whose pivot vanished.
    """
    n = indptr.size - 1
    lu = data.copy()
    where = np.full(n, -1, dtype=np.int64)
    flops = 0
    for i in range(n):
        for p in range(indptr[i], indptr[i + 1]):
            where[indices[p]] = p
        for p in range(indptr[i], indptr[i + 1]):
            k = indices[p]
            if k >= i:
                break
            pivot = lu[diag_ptr[k]]
            if pivot == 0.0:
                return lu, flops, k
            lu[p] /= pivot
            lik = lu[p]
            flops += 1
            for q in range(diag_ptr[k] + 1, indptr[k + 1]):
                w = where[indices[q]]
                if w != -1:
                    lu[w] -= lik * lu[q]
                    flops += 2
        for p in range(indptr[i], indptr[i + 1]):
            where[indices[p]] = -1
        if lu[diag_ptr[i]] == 0.0:
            return lu, flops, i
    return lu, flops, -1


@njit(cache=True)
def ilu0_solve(indptr, indices, lu, diag_ptr, r, z):
    """z = (LU)^{-1} r with unit-lower L and upper U stored in ``lu``."""
    n = indptr.size - 1
    for i in range(n):
        s = r[i]
        for p in range(indptr[i], diag_ptr[i]):
            s -= lu[p] * z[indices[p]]
        z[i] = s
    for i in range(n - 1, -1, -1):
        s = z[i]
        for p in range(diag_ptr[i] + 1, indptr[i + 1]):
            s -= lu[p] * z[indices[p]]
        z[i] = s / lu[diag_ptr[i]]
    return z


@njit(cache=True)
def ssor_solve(indptr, indices, data, diag_ptr, omega, r, z):
    """z = M^{-1} r for M = w/(2-w) (D/w + L) D^{-1} (D/w + U)."""
    n = indptr.size - 1
    for i in range(n):
        s = r[i]
        for p in range(indptr[i], diag_ptr[i]):
            s -= data[p] * z[indices[p]]
        z[i] = s * omega / data[diag_ptr[i]]
    for i in range(n):
        z[i] *= data[diag_ptr[i]]
    for i in range(n - 1, -1, -1):
        s = z[i]
        for p in range(diag_ptr[i] + 1, indptr[i + 1]):
            s -= data[p] * z[indices[p]]
        z[i] = s * omega / data[diag_ptr[i]]
    scale = (2.0 - omega) / omega
    for i in range(n):
        z[i] *= scale
    return z
