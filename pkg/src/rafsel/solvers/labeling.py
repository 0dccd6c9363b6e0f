"""Method catalogs, per-matrix labeling sweeps and the slowdown metric."""
from __future__ import annotations

import hashlib
import json
import statistics
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..exceptions import ConfigError
from ..sparse import CsrMatrix
from .krylov import SOLVERS, Method, SolveConfig, SolveOutcome, Status, solve, spmv
from .precond import PRECONDITIONERS

RANK_MODES = ("walltime", "iterations")
RHS_POLICIES = ("manufactured", "ones", "random")


@dataclass(frozen=True)
class MethodCatalog:
    """Ordered, duplicate-free list of (solver, preconditioner) pairs."""

    entries: tuple

    def __post_init__(self):
        entries = tuple(Method.parse(e) for e in self.entries)
        if len(entries) < 2:
            raise ConfigError("a catalog needs at least two methods")
        if len(set(entries)) != len(entries):
            raise ConfigError("catalog entries must be unique")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def default(cls) -> "MethodCatalog":
        return cls(tuple(Method(s, p) for s in SOLVERS for p in PRECONDITIONERS))

    @property
    def k(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list:
        return [e.name for e in self.entries]

    def to_json(self) -> str:
        return json.dumps([list(e) for e in self.entries], separators=(",", ":"))

    @classmethod
    def from_json(cls, text) -> "MethodCatalog":
        data = json.loads(text) if isinstance(text, str) else text
        return cls(tuple(tuple(e) for e in data))

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def __len__(self):
        return self.k

    def __getitem__(self, i) -> Method:
        return self.entries[i]


@dataclass
class LabelRecord:
    matrix_id: str
    outcomes: list
    rank_by: str = "walltime"
    optimal_index: Optional[int] = field(default=None)

    def __post_init__(self):
        if self.rank_by not in RANK_MODES:
            raise ConfigError(f"rank_by must be one of {RANK_MODES}")
        if self.optimal_index is None:
            self.optimal_index = self._argmin()

    def cost(self, i: int) -> float:
        """Ranking cost of outcome ``i``: seconds, or operation count."""
        o = self.outcomes[i]
        if self.rank_by == "walltime":
            return float(o.walltime)
        return float(o.work)

    def _argmin(self):
        ok = [i for i, o in enumerate(self.outcomes) if o.status is Status.CONVERGED]
        if not ok:
            return None
        # ties go to the lower catalog index
        return min(ok, key=lambda i: (self.cost(i), i))

    @property
    def unlabelable(self) -> bool:
        return self.optimal_index is None

    @property
    def label(self) -> np.ndarray:
        y = np.zeros(len(self.outcomes), dtype=np.int8)
        if self.optimal_index is not None:
            y[self.optimal_index] = 1
        return y

    def to_dict(self) -> dict:
        return {
            "matrix_id": self.matrix_id,
            "rank_by": self.rank_by,
            "optimal_index": self.optimal_index,
            "unlabelable": self.unlabelable,
            "outcomes": [o.to_dict(with_walltime=self.rank_by == "walltime")
                         for o in self.outcomes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabelRecord":
        outcomes = [SolveOutcome.from_dict(o) for o in d["outcomes"]]
        return cls(d["matrix_id"], outcomes, d.get("rank_by", "walltime"),
                   d.get("optimal_index"))


def make_rhs(A: CsrMatrix, policy: str = "manufactured", seed: int = 0) -> np.ndarray:
    """Right-hand side for a labeling sweep.

    ``manufactured`` gives b = A·1 (so the exact solution is all ones),
    ``ones`` gives b = 1, ``random`` a seeded unit vector.
    """
    if policy == "manufactured":
        b = spmv(A, np.ones(A.order))
        if np.linalg.norm(b) > 0:
            return b
        return np.ones(A.order)
    if policy == "ones":
        return np.ones(A.order)
    if policy == "random":
        v = np.random.default_rng(seed).standard_normal(A.order)
        return v / np.linalg.norm(v)
    raise ConfigError(f"unknown rhs policy {policy!r}")


def label_matrix(A: CsrMatrix, catalog: MethodCatalog, cfg: Optional[SolveConfig] = None,
                 rhs_policy: str = "manufactured", *, rank_by: str = "walltime",
                 repeats: int = 3, matrix_id: str = "", seed: int = 0) -> LabelRecord:
    """Run every catalog method on ``A`` and pick the cheapest converged one.

    With ``rank_by="walltime"`` each method is timed ``repeats`` times and the
    median is kept.  ``rank_by="iterations"`` ranks by the operation count
    accumulated from the iteration history and is bit-reproducible.
    """
    cfg = cfg or SolveConfig()
    cfg.validate()
    if rank_by not in RANK_MODES:
        raise ConfigError(f"rank_by must be one of {RANK_MODES}")
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    b = make_rhs(A, rhs_policy, seed)
    outcomes = []
    for method in catalog.entries:
        first = solve(A, b, method, cfg, keep_solution=False)
        if rank_by == "walltime" and repeats > 1 and first.converged:
            times = [first.walltime] + [solve(A, b, method, cfg, keep_solution=False).walltime
                                        for _ in range(repeats - 1)]
            first.walltime = statistics.median(times)
        outcomes.append(first)
    return LabelRecord(matrix_id, outcomes, rank_by)


def slowdown(record: LabelRecord, selected_index: int) -> float:
    """Optimal cost divided by the cost of the selected method (0 if it failed)."""
    n = len(record.outcomes)
    if not 0 <= selected_index < n:
        raise IndexError(f"selected index {selected_index} outside catalog of size {n}")
    if record.optimal_index is None:
        raise ValueError(f"record {record.matrix_id!r} has no optimal method")
    if not record.outcomes[selected_index].converged:
        return 0.0
    if selected_index == record.optimal_index:
        return 1.0
    sel = record.cost(selected_index)
    if sel <= 0:
        return 1.0
    return min(1.0, record.cost(record.optimal_index) / sel)


def selected_cost(record: LabelRecord, selected_index: int, cfg: Optional[SolveConfig] = None):
    """Cost an operator pays for the selection; failures cost the timeout.

    In operation-count mode a failed selection costs the work it burned
    before stopping, but never less than the optimal method's cost.
    """
    o = record.outcomes[selected_index]
    if o.converged:
        return record.cost(selected_index)
    if record.rank_by == "walltime":
        return float((cfg or SolveConfig()).timeout)
    floor = record.cost(record.optimal_index) if record.optimal_index is not None else 0.0
    return max(float(o.work), floor)


def catalog_for(names: Sequence[str]) -> MethodCatalog:
    return MethodCatalog(tuple(Method.parse(n) for n in names))
