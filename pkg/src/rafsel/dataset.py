"""Corpus-level glue: extract features for a manifest and load them back."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .exceptions import RafError
from .features import (DatasetOrderStats, FeatureRecord, extract_raf, extract_rgb_baseline,
                       load_record, save_record)
from .generator import CorpusManifest, map_parallel, worker_count
from .model import stratified_split
from .sparse import read_matrix_market

log = logging.getLogger(__name__)

MODES = ("raf", "baseline")


def order_range(manifest: CorpusManifest) -> tuple:
    orders = [e.order for e in manifest.entries]
    return (min(orders), max(orders)) if orders else (0, 0)


def feature_record(A, mode: str, m: int, stats: Optional[DatasetOrderStats] = None,
                   meta=None) -> FeatureRecord:
    if mode == "raf":
        return FeatureRecord.from_raf(extract_raf(A, m), meta)
    if mode == "baseline":
        if stats is None:
            raise ValueError("baseline extraction needs the dataset order range")
        return FeatureRecord.from_baseline(extract_rgb_baseline(A, m, stats), meta)
    raise ValueError(f"unknown feature mode {mode!r}")


def _extract_one(args):
    src, dst, matrix_id, mode, m, stats = args
    try:
        A = read_matrix_market(src)
        rec = feature_record(A, mode, m, stats, {"matrix_id": matrix_id})
        if stats is not None:
            rec.meta["order_range"] = [stats.n_min, stats.n_max]
        save_record(dst, rec)
        return matrix_id, None
    except (RafError, OSError, ValueError) as exc:
        return matrix_id, f"{type(exc).__name__}: {exc}"


def extract_corpus(manifest_path, out_dir, mode="raf", m=64, *, workers=None,
                   stats: Optional[DatasetOrderStats] = None):
    """Write ``<out_dir>/<matrix_id>.rafb`` for every manifest entry.

    Returns ``(written_ids, failures)`` where failures maps ids to messages.
    """
    manifest = CorpusManifest.read(manifest_path)
    if mode == "baseline" and stats is None:
        stats = DatasetOrderStats(*order_range(manifest))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(manifest.resolve(e, manifest_path), out / f"{e.matrix_id}.rafb", e.matrix_id,
             mode, m, stats if mode == "baseline" else None) for e in manifest.entries]
    written, failures = [], {}
    for mid, err in map_parallel(_extract_one, jobs, workers or worker_count()):
        if err is None:
            written.append(mid)
        else:
            failures[mid] = err
            log.error("feature extraction failed for %s: %s", mid, err)
    return written, failures


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    records: list
    ids: list
    fingerprint: str
    catalog: list
    mode: str
    order_range: Optional[tuple] = None

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], [self.records[i] for i in idx],
                       [self.ids[i] for i in idx], self.fingerprint, self.catalog, self.mode,
                       self.order_range)

    def split(self, seed: int = 0, fractions=(0.70, 0.15, 0.15)):
        """Stratified (train, validation, test) subsets."""
        return tuple(self.subset(p) for p in stratified_split(self.y, fractions, seed))

    def __len__(self):
        return len(self.y)


def load_dataset(manifest_path, features_dir, mode: Optional[str] = None) -> Dataset:
    """Stack the feature rows of every labeled manifest entry.

    Entries whose feature file is missing are skipped with a warning.
    """
    manifest = CorpusManifest.read(manifest_path)
    rows, ys, recs, ids, modes = [], [], [], [], set()
    for e in manifest.labeled():
        path = Path(features_dir) / f"{e.matrix_id}.rafb"
        if not path.exists():
            log.warning("no feature file for %s", e.matrix_id)
            continue
        rec = load_record(path)
        if mode is not None and rec.mode != mode:
            continue
        modes.add(rec.mode)
        rows.append(rec.row())
        ys.append(e.record.optimal_index)
        recs.append(e.record)
        ids.append(e.matrix_id)
    if len(modes) > 1:
        raise RafError(f"feature directory mixes modes {sorted(modes)}")
    found = modes.pop() if modes else (mode or "raf")
    rng = order_range(manifest) if found == "baseline" else None
    X = np.stack(rows) if rows else np.zeros((0, 0))
    return Dataset(X, np.asarray(ys, dtype=np.int64), recs, ids, manifest.fingerprint,
                   manifest.catalog.names, found, rng)
