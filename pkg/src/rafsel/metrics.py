"""Selection metrics: accuracy, top-n, solution cost, slowdown, confusion."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .exceptions import CatalogMismatch, EmptyCorpus
from .solvers import LabelRecord, SolveConfig, selected_cost, slowdown

TOP_N = (1, 2, 3)


@dataclass
class EvalReport:
    n: int
    accuracy: float
    top_n: dict
    mean_cost: float
    cost_unit: str
    mean_slowdown: float
    confusion: list

    def to_dict(self) -> dict:
        d = asdict(self)
        d["top_n"] = {str(k): v for k, v in self.top_n.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self, label: str = "model") -> str:
        """One aligned text row per report, plus a header."""
        return format_table([(label, self)])


def format_table(rows: Sequence[tuple]) -> str:
    unit = rows[0][1].cost_unit if rows else "s"
    head = ["model", f"cost ({unit})", "slowdown", "accuracy", "top-2", "top-3", "n"]
    body = [[name, f"{r.mean_cost:.4g}", f"{r.mean_slowdown:.3f}", f"{r.accuracy:.3f}",
             f"{r.top_n.get(2, float('nan')):.3f}", f"{r.top_n.get(3, float('nan')):.3f}",
             str(r.n)] for name, r in rows]
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                       for i, (c, w) in enumerate(zip(line, widths)))
             for line in [head] + body]
    return "\n".join(lines)


def top_n_accuracy(rankings: np.ndarray, y_true: np.ndarray, n: int) -> float:
    rankings = np.asarray(rankings)
    hits = (rankings[:, :n] == np.asarray(y_true)[:, None]).any(axis=1)
    return float(hits.mean())


def evaluate_rankings(rankings, records: Sequence[LabelRecord],
                      cfg: Optional[SolveConfig] = None) -> EvalReport:
    """Metrics for precomputed per-row method rankings (best first)."""
    rankings = np.asarray(rankings, dtype=np.int64)
    if len(records) == 0:
        raise EmptyCorpus("cannot evaluate on an empty corpus")
    if rankings.ndim != 2 or len(rankings) != len(records):
        raise ValueError("need one ranking row per record")
    k = len(records[0].outcomes)
    if any(len(r.outcomes) != k for r in records) or rankings.shape[1] != k:
        raise CatalogMismatch("records and rankings disagree on the catalog size")
    if any(r.optimal_index is None for r in records):
        raise ValueError("evaluation needs labeled records only")
    y = np.array([r.optimal_index for r in records])
    sel = rankings[:, 0]
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (y, sel), 1)
    top = {n: top_n_accuracy(rankings, y, min(n, k)) for n in TOP_N}
    costs = [selected_cost(r, int(s), cfg) for r, s in zip(records, sel)]
    slows = [slowdown(r, int(s)) for r, s in zip(records, sel)]
    unit = "s" if records[0].rank_by == "walltime" else "flops"
    return EvalReport(len(records), top[1], top, float(np.mean(costs)), unit,
                      float(np.mean(slows)), conf.tolist())


def evaluate(model, X, records: Sequence[LabelRecord], fingerprint: Optional[str] = None,
             cfg: Optional[SolveConfig] = None) -> EvalReport:
    """Score ``model`` on feature rows ``X`` against their label records."""
    if len(records) == 0:
        raise EmptyCorpus("cannot evaluate on an empty corpus")
    model.check_fingerprint(fingerprint)
    if len(records[0].outcomes) != model.k:
        raise CatalogMismatch(f"model has {model.k} classes, records carry "
                              f"{len(records[0].outcomes)} outcomes")
    return evaluate_rankings(model.rank(X), records, cfg)


def constant_rankings(n: int, k: int, first: int) -> np.ndarray:
    """Rankings of a selector that always puts ``first`` on top."""
    rest = [i for i in range(k) if i != first]
    return np.tile([first] + rest, (n, 1))


def random_selector_slowdown(records: Sequence[LabelRecord]) -> float:
    """Expected slowdown of a uniformly random choice over the catalog."""
    if len(records) == 0:
        raise EmptyCorpus("cannot evaluate on an empty corpus")
    per = [np.mean([slowdown(r, j) for j in range(len(r.outcomes))]) for r in records]
    return float(np.mean(per))


def majority_rate(y_train, y_test) -> float:
    """Test accuracy of always predicting the most common training class."""
    y_train = np.asarray(y_train)
    values, counts = np.unique(y_train, return_counts=True)
    top = values[np.argmax(counts)]
    return float(np.mean(np.asarray(y_test) == top))
