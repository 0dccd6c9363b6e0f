"""Absolute-feature ablation sweep: retrain with each value hidden in turn."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import clone

from .features import ABSOLUTE_NAMES
from .metrics import evaluate
from .model import FULL_MASK, RafSelector


def ablation_masks() -> list:
    """(variant name, mask) pairs: complete, each value removed, all removed."""
    out = [("complete", FULL_MASK)]
    for i, name in enumerate(ABSOLUTE_NAMES):
        out.append((f"w/o {name}", tuple(j != i for j in range(len(ABSOLUTE_NAMES)))))
    out.append(("w/o all", (False,) * len(ABSOLUTE_NAMES)))
    return out


@dataclass
class AblationRow:
    variant: str
    mask: tuple
    accuracy: list = field(default_factory=list)
    slowdown: list = field(default_factory=list)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracy))

    @property
    def mean_slowdown(self) -> float:
        return float(np.mean(self.slowdown))


@dataclass
class AblationReport:
    rows: list
    seeds: list

    def row(self, variant: str) -> AblationRow:
        return next(r for r in self.rows if r.variant == variant)

    def to_dict(self) -> dict:
        return {"seeds": list(self.seeds), "rows": [
            {"variant": r.variant, "mask": list(r.mask), "accuracy": r.accuracy,
             "slowdown": r.slowdown, "mean_accuracy": r.mean_accuracy,
             "mean_slowdown": r.mean_slowdown} for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        head = ("variant", "accuracy", "slowdown")
        body = [(r.variant, f"{r.mean_accuracy:.3f}", f"{r.mean_slowdown:.3f}") for r in self.rows]
        w = [max(len(x) for x in col) for col in zip(head, *body)]
        return "\n".join(f"{a.ljust(w[0])}  {b.rjust(w[1])}  {c.rjust(w[2])}"
                         for a, b, c in [head] + body)


def run_ablation(base: RafSelector, train, val, test, records: Sequence, seeds=(0, 1, 2),
                 masks: Optional[list] = None, strict_width: bool = True) -> AblationReport:
    """Retrain ``base`` once per (mask, seed) and score it on ``test``.

    ``train``/``val``/``test`` are (X, y) pairs; ``records`` are the label
    records of the test rows.  Only ``feature_mask``, ``strict_width`` and
    ``random_state`` change between runs.
    """
    rows = []
    for name, mask in masks or ablation_masks():
        row = AblationRow(name, tuple(mask))
        for seed in seeds:
            est = clone(base).set_params(feature_mask=mask, strict_width=strict_width,
                                         random_state=seed)
            est.fit(*train, eval_set=val)
            rep = evaluate(est, test[0], records)
            row.accuracy.append(rep.accuracy)
            row.slowdown.append(rep.mean_slowdown)
        rows.append(row)
    return AblationReport(rows, list(seeds))
