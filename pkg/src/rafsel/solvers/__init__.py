"""Krylov solvers, preconditioners and the labeling harness."""
from .krylov import SOLVERS, Method, SolveConfig, SolveOutcome, Status, solve, spmv
from .labeling import (
    RANK_MODES,
    RHS_POLICIES,
    LabelRecord,
    MethodCatalog,
    catalog_for,
    label_matrix,
    make_rhs,
    selected_cost,
    slowdown,
)
from .precond import PRECONDITIONERS, build_preconditioner

__all__ = [
    "SOLVERS", "PRECONDITIONERS", "RANK_MODES", "RHS_POLICIES",
    "Method", "SolveConfig", "SolveOutcome", "Status", "LabelRecord", "MethodCatalog",
    "solve", "spmv", "build_preconditioner", "label_matrix", "make_rhs",
    "selected_cost", "slowdown", "catalog_for",
]
