"""Preconditioned CG, restarted GMRES and BiCGSTAB.

GMRES and BiCGSTAB are left-preconditioned (they iterate on M^{-1}A); CG is
the standard PCG recurrence.  Whatever the internal recurrence tracks, a
solve only reports ``Converged`` after the true residual ``||b - Ax|| / ||b||``
has been recomputed and found within ``rtol``.
"""
from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np

from ..exceptions import BreakdownError, ConfigError, DimensionError
from ..sparse import CsrMatrix
from . import kernels
from .precond import PRECONDITIONERS, build_preconditioner

SOLVERS = ("cg", "gmres", "bicgstab")


class Status(str, enum.Enum):
    CONVERGED = "Converged"
    MAX_ITERS = "MaxIters"
    DIVERGED = "Diverged"
    BREAKDOWN = "Breakdown"
    TIMEOUT = "Timeout"

    def __str__(self):
        return self.value


class Method(NamedTuple):
    solver: str
    preconditioner: str

    @property
    def name(self) -> str:
        return f"{self.solver}+{self.preconditioner}"

    @classmethod
    def parse(cls, spec) -> "Method":
        if isinstance(spec, Method):
            return spec
        if isinstance(spec, str):
            solver, _, prec = spec.partition("+")
            spec = (solver, prec or "none")
        m = cls(*spec)
        if m.solver not in SOLVERS:
            raise ConfigError(f"unknown solver {m.solver!r}")
        if m.preconditioner not in PRECONDITIONERS:
            raise ConfigError(f"unknown preconditioner {m.preconditioner!r}")
        return m


@dataclass(frozen=True)
class SolveConfig:
    rtol: float = 1e-6
    max_iters: Optional[int] = None  # None: 10 * order, capped at 20000
    timeout: float = 30.0
    gmres_restart: int = 30
    omega: float = 1.0
    block_size: int = 4
    divtol: float = 1e4

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0.0 < self.rtol < 1.0:
            raise ConfigError("rtol must lie in (0, 1)")
        if self.max_iters is not None and self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if not self.timeout > 0:
            raise ConfigError("timeout must be positive")
        if self.gmres_restart < 1:
            raise ConfigError("gmres_restart must be >= 1")
        if not 0.0 < self.omega < 2.0:
            raise ConfigError("omega must lie in (0, 2)")
        if self.block_size < 1:
            raise ConfigError("block_size must be >= 1")
        if not self.divtol > 1.0:
            raise ConfigError("divtol must exceed 1")

    def iteration_cap(self, order: int) -> int:
        if self.max_iters is not None:
            return int(self.max_iters)
        return min(10 * order, 20000)

    def with_(self, **kw) -> "SolveConfig":
        return replace(self, **kw)


@dataclass
class SolveOutcome:
    status: Status
    iterations: int
    final_relres: float
    walltime: Optional[float]
    work: int
    x: Optional[np.ndarray] = None

    @property
    def converged(self) -> bool:
        return self.status is Status.CONVERGED

    def to_dict(self, with_walltime: bool = True) -> dict:
        d = {
            "status": self.status.value,
            "iterations": int(self.iterations),
            "relres": float(self.final_relres),
            "work": int(self.work),
        }
        if with_walltime:
            d["walltime"] = self.walltime
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SolveOutcome":
        return cls(Status(d["status"]), int(d["iterations"]), float(d["relres"]),
                   d.get("walltime"), int(d.get("work", 0)))


def spmv(A: CsrMatrix, x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.shape != (A.order,):
        raise DimensionError(f"vector of length {x.shape} for order {A.order}")
    return kernels.csr_matvec(A.row_offsets, A.col_indices, A.values, x, np.empty(A.order))


class _Run:
    """Shared bookkeeping: operator, counters, deadline and true residuals."""

    def __init__(self, A, b, M, cfg):
        self.indptr = np.ascontiguousarray(A.row_offsets)
        self.indices = np.ascontiguousarray(A.col_indices)
        self.data = np.ascontiguousarray(A.values)
        self.n = A.order
        self.b = b
        self.bnorm = float(np.linalg.norm(b))
        self.M = M
        self.cfg = cfg
        self.maxit = cfg.iteration_cap(A.order)
        self.spmv_work = 2 * A.nnz
        self.work = M.setup_work
        self.iterations = 0
        self.deadline = time.monotonic() + cfg.timeout

    def matvec(self, x):
        self.work += self.spmv_work
        return kernels.csr_matvec(self.indptr, self.indices, self.data, x, np.empty(self.n))

    def prec(self, r):
        self.work += self.M.apply_work + self.n
        return self.M.apply(r)

    def vec(self, count=1):
        self.work += 2 * self.n * count

    def timed_out(self):
        return time.monotonic() > self.deadline

    def true_residual(self, x):
        r = self.b - self.matvec(x)
        self.work += self.n
        return r, float(np.linalg.norm(r)) / self.bnorm


def _finite(*vals):
    return all(math.isfinite(v) for v in vals)


def _cg(run: _Run, x):
    rtol = run.cfg.rtol
    target = rtol
    r = run.b.copy()
    z = run.prec(r)
    p = z.copy()
    rz = float(r @ z)
    run.vec()
    while True:
        if run.iterations >= run.maxit:
            return Status.MAX_ITERS
        if run.timed_out():
            return Status.TIMEOUT
        run.iterations += 1
        Ap = run.matvec(p)
        pAp = float(p @ Ap)
        run.vec()
        if not _finite(pAp, rz):
            return Status.DIVERGED
        if pAp <= 0.0:
            return Status.BREAKDOWN
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        rnorm = float(np.linalg.norm(r))
        run.vec(3)
        if not math.isfinite(rnorm) or rnorm > run.cfg.divtol * run.bnorm:
            return Status.DIVERGED
        if rnorm <= target * run.bnorm:
            r, rel = run.true_residual(x)
            if rel <= rtol:
                return Status.CONVERGED
            target *= max(rtol / rel, 1e-3) * 0.9
        z = run.prec(r)
        rz_new = float(r @ z)
        run.vec()
        if rz_new == 0.0:
            return Status.BREAKDOWN
        p = z + (rz_new / rz) * p
        run.vec()
        rz = rz_new


def _gmres(run: _Run, x):
    rtol = run.cfg.rtol
    restart = run.cfg.gmres_restart
    n = run.n
    pb = float(np.linalg.norm(run.prec(run.b)))
    if not math.isfinite(pb) or pb == 0.0:
        return Status.BREAKDOWN
    target = rtol
    r_true = run.b.copy()
    V = np.empty((restart + 1, n))
    H = np.zeros((restart + 1, restart))
    cs = np.zeros(restart)
    sn = np.zeros(restart)
    while True:
        r = run.prec(r_true)
        beta = float(np.linalg.norm(r))
        run.vec()
        if not math.isfinite(beta):
            return Status.DIVERGED
        if beta == 0.0:
            return Status.BREAKDOWN
        V[0] = r / beta
        g = np.zeros(restart + 1)
        g[0] = beta
        H[:] = 0.0
        j_used = 0
        stop = None
        happy = False
        for j in range(restart):
            if run.iterations >= run.maxit:
                stop = Status.MAX_ITERS
                break
            if run.timed_out():
                stop = Status.TIMEOUT
                break
            run.iterations += 1
            w = run.prec(run.matvec(V[j]))
            for i in range(j + 1):
                H[i, j] = float(w @ V[i])
                w -= H[i, j] * V[i]
            run.vec(2 * (j + 1))
            h = float(np.linalg.norm(w))
            run.vec()
            H[j + 1, j] = h
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            denom = math.hypot(H[j, j], H[j + 1, j])
            if not math.isfinite(denom):
                return Status.DIVERGED
            j_used = j + 1
            if denom == 0.0:
                happy = True
                j_used = j
                break
            cs[j], sn[j] = H[j, j] / denom, H[j + 1, j] / denom
            H[j, j] = denom
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            if h == 0.0:
                happy = True
                break
            V[j + 1] = w / h
            if abs(g[j + 1]) <= target * pb:
                break
        if j_used:
            R = H[:j_used, :j_used]
            if np.any(np.diag(R) == 0.0):
                return Status.BREAKDOWN
            y = np.linalg.solve(np.triu(R), g[:j_used]) if j_used > 1 else g[:1] / R[0, 0]
            x += V[:j_used].T @ y
            run.vec(j_used)
        if not np.all(np.isfinite(x)):
            return Status.DIVERGED
        r_true, rel = run.true_residual(x)
        if rel <= rtol:
            return Status.CONVERGED
        if not math.isfinite(rel) or rel > run.cfg.divtol:
            return Status.DIVERGED
        if stop is not None:
            return stop
        if happy:
            return Status.BREAKDOWN
        if j_used and abs(g[j_used]) <= target * pb:
            target *= max(rtol / rel, 1e-3) * 0.9


def _bicgstab(run: _Run, x):
    rtol = run.cfg.rtol
    target = rtol
    r = run.prec(run.b)
    pb = float(np.linalg.norm(r))
    if not math.isfinite(pb) or pb == 0.0:
        return Status.BREAKDOWN
    rhat = r.copy()
    rho = alpha = omega = 1.0
    v = np.zeros(run.n)
    p = np.zeros(run.n)

    def check(xc):
        nonlocal target
        _, rel = run.true_residual(xc)
        if rel <= rtol:
            return True
        target *= max(rtol / rel, 1e-3) * 0.9
        return False

    while True:
        if run.iterations >= run.maxit:
            return Status.MAX_ITERS
        if run.timed_out():
            return Status.TIMEOUT
        run.iterations += 1
        rho_new = float(rhat @ r)
        run.vec()
        if not math.isfinite(rho_new):
            return Status.DIVERGED
        if rho_new == 0.0:
            return Status.BREAKDOWN
        beta = (rho_new / rho) * (alpha / omega)
        p = r + beta * (p - omega * v)
        v = run.prec(run.matvec(p))
        denom = float(rhat @ v)
        run.vec(3)
        if not math.isfinite(denom):
            return Status.DIVERGED
        if denom == 0.0:
            return Status.BREAKDOWN
        alpha = rho_new / denom
        s = r - alpha * v
        snorm = float(np.linalg.norm(s))
        run.vec(2)
        if not math.isfinite(snorm):
            return Status.DIVERGED
        if snorm <= target * pb:
            x += alpha * p
            run.vec()
            if check(x):
                return Status.CONVERGED
            r = run.prec(run.b - run.matvec(x))
            continue
        t = run.prec(run.matvec(s))
        tt = float(t @ t)
        run.vec()
        if not math.isfinite(tt):
            return Status.DIVERGED
        if tt == 0.0:
            return Status.BREAKDOWN
        omega = float(t @ s) / tt
        x += alpha * p + omega * s
        r = s - omega * t
        rnorm = float(np.linalg.norm(r))
        run.vec(5)
        if not math.isfinite(rnorm) or rnorm > run.cfg.divtol * pb:
            return Status.DIVERGED
        if rnorm <= target * pb and check(x):
            return Status.CONVERGED
        if omega == 0.0:
            return Status.BREAKDOWN
        rho = rho_new


_DRIVERS = {"cg": _cg, "gmres": _gmres, "bicgstab": _bicgstab}


def solve(A: CsrMatrix, b, method, cfg: Optional[SolveConfig] = None,
          *, keep_solution: bool = True) -> SolveOutcome:
    """Solve ``A x = b`` from a zero initial guess with ``method``.

    ``method`` is a :class:`Method` or a string such as ``"gmres+ilu0"``.
    Preconditioner build failures and CG on a structurally nonsymmetric
    matrix come back as ``Breakdown`` outcomes rather than exceptions.
    """
    cfg = cfg or SolveConfig()
    method = Method.parse(method)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if b.shape != (A.order,):
        raise DimensionError(f"right-hand side of length {b.shape} for order {A.order}")
    if not np.linalg.norm(b) > 0:
        raise DimensionError("right-hand side must be nonzero")

    t0 = time.perf_counter()
    x = np.zeros(A.order)
    if method.solver == "cg" and not A.is_structurally_symmetric():
        return SolveOutcome(Status.BREAKDOWN, 0, 1.0, time.perf_counter() - t0, 0,
                            x if keep_solution else None)
    try:
        M = build_preconditioner(A, method.preconditioner, cfg)
    except BreakdownError:
        return SolveOutcome(Status.BREAKDOWN, 0, 1.0, time.perf_counter() - t0, 0,
                            x if keep_solution else None)
    run = _Run(A, b, M, cfg)
    with np.errstate(all="ignore"):
        status = _DRIVERS[method.solver](run, x)
        if np.all(np.isfinite(x)):
            rel = float(np.linalg.norm(b - spmv(A, x))) / run.bnorm
        else:
            rel = math.inf
    walltime = time.perf_counter() - t0
    if not math.isfinite(rel):
        status, rel = Status.DIVERGED, math.inf
    elif rel <= cfg.rtol:
        status = Status.CONVERGED
    elif status is Status.CONVERGED:
        status = Status.MAX_ITERS
    return SolveOutcome(status, run.iterations, rel, walltime, int(run.work),
                        x if keep_solution else None)
