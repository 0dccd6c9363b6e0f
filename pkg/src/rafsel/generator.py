"""Five-point finite-difference matrices and labeled corpus generation.

Three families are produced on an ``nx`` x ``ny`` interior grid with
lexicographic (x fastest) node ordering:

* ``poisson``     -- the 5-point Laplacian (diagonal 4, neighbors -1),
* ``anisotropic`` -- x-coupling 1, y-coupling ``epsilon``,
* ``convdiff``    -- diffusion plus first-order upwind convection.

Every family accepts an optional ``reaction`` term added to the diagonal
and a ``diffusion`` scale multiplying the whole operator.  Corpus generation
samples coefficients log-uniformly so that different catalog methods win.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .exceptions import SpecError
from .solvers.krylov import SolveConfig
from .solvers.labeling import LabelRecord, MethodCatalog, label_matrix
from .sparse import CsrMatrix, write_matrix_market

log = logging.getLogger(__name__)

FAMILIES = ("poisson", "anisotropic", "convdiff")
CORPUS_ORDER_BOUNDS = (1000, 10000)
MAX_ORDER = 10_000_000


@dataclass(frozen=True)
class PdeSpec:
    family: str
    nx: int
    ny: int
    epsilon: float = 1.0
    cx: float = 0.0
    cy: float = 0.0
    peclet: float = 1.0
    diffusion: float = 1.0
    reaction: float = 0.0
    seed: int = 0

    @property
    def order(self) -> int:
        return self.nx * self.ny

    def validate(self, bounds: Optional[tuple] = None) -> None:
        if self.family not in FAMILIES:
            raise SpecError(f"unknown family {self.family!r}")
        if self.nx < 1 or self.ny < 1:
            raise SpecError("grid dimensions must be >= 1")
        if self.order > MAX_ORDER:
            raise SpecError(f"order {self.order} exceeds {MAX_ORDER}")
        if bounds is not None and not bounds[0] <= self.order <= bounds[1]:
            raise SpecError(f"order {self.order} outside {bounds}")
        coeffs = (self.epsilon, self.cx, self.cy, self.peclet, self.diffusion, self.reaction)
        if not all(math.isfinite(c) for c in coeffs):
            raise SpecError("coefficients must be finite")
        if self.epsilon <= 0 or self.diffusion <= 0 or self.peclet < 0 or self.reaction < 0:
            raise SpecError("epsilon and diffusion must be positive; "
                            "peclet and reaction non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def _stencil(nx, ny, west, east, south, north, center) -> CsrMatrix:
    """Assemble a constant-coefficient 5-point stencil (Dirichlet boundary)."""
    idx = np.arange(nx * ny).reshape(ny, nx)
    rows = [idx.ravel()]
    cols = [idx.ravel()]
    vals = [np.full(nx * ny, center, dtype=np.float64)]
    for coef, src, dst in (
        (west, idx[:, 1:], idx[:, :-1]),
        (east, idx[:, :-1], idx[:, 1:]),
        (south, idx[1:, :], idx[:-1, :]),
        (north, idx[:-1, :], idx[1:, :]),
    ):
        if coef != 0.0 and src.size:
            rows.append(src.ravel())
            cols.append(dst.ravel())
            vals.append(np.full(src.size, coef, dtype=np.float64))
    return CsrMatrix.from_coo(nx * ny, np.concatenate(rows), np.concatenate(cols),
                              np.concatenate(vals))


def generate_poisson2d(nx: int, ny: int) -> CsrMatrix:
    PdeSpec("poisson", nx, ny).validate()
    return _stencil(nx, ny, -1.0, -1.0, -1.0, -1.0, 4.0)


def generate_anisotropic(spec: PdeSpec) -> CsrMatrix:
    spec.validate()
    e, k = spec.epsilon, spec.diffusion
    return _stencil(spec.nx, spec.ny, -k, -k, -k * e, -k * e,
                    k * (2.0 + 2.0 * e) + spec.reaction)


def generate_convection_diffusion(spec: PdeSpec) -> CsrMatrix:
    """Diffusion ``k`` times the 5-point Laplacian plus upwinded convection.

    The mesh Péclet numbers are ``peclet * cx`` and ``peclet * cy``; for
    positive ``cx`` the upwind neighbor is the western one, whose coupling
    grows to ``-(1 + px)`` while the eastern one stays at ``-1``.
    """
    spec.validate()
    k = spec.diffusion
    px, py = spec.peclet * spec.cx, spec.peclet * spec.cy
    west = -(1.0 + max(px, 0.0))
    east = -(1.0 + max(-px, 0.0))
    south = -(1.0 + max(py, 0.0))
    north = -(1.0 + max(-py, 0.0))
    center = 4.0 + abs(px) + abs(py)
    return _stencil(spec.nx, spec.ny, k * west, k * east, k * south, k * north,
                    k * center + spec.reaction)


def generate(spec: PdeSpec) -> CsrMatrix:
    spec.validate()
    if spec.family == "poisson":
        A = _stencil(spec.nx, spec.ny, -1.0, -1.0, -1.0, -1.0, 4.0)
        if spec.diffusion != 1.0 or spec.reaction != 0.0:
            A = CsrMatrix(A.order, A.row_offsets, A.col_indices,
                          A.values * spec.diffusion
                          + spec.reaction * (A.row_indices() == A.col_indices))
        return A
    if spec.family == "anisotropic":
        return generate_anisotropic(spec)
    return generate_convection_diffusion(spec)


# ---------------------------------------------------------------------------
# corpus sampling
# ---------------------------------------------------------------------------

@dataclass
class GenerationConfig:
    """Ranges for coefficient sampling; loadable from TOML."""

    count: int = 300
    families: tuple = FAMILIES
    # unlisted families weigh 1
    family_weights: dict = field(default_factory=lambda: {"convdiff": 2.0})
    seed: int = 0
    order_min: int = 1000
    order_max: int = 4000
    epsilon: tuple = (1e-3, 1.0)
    peclet: tuple = (1.0, 300.0)
    diffusion: tuple = (0.1, 10.0)
    reaction: tuple = (10.0, 1e4)
    reaction_prob: float = 0.6
    balance_ratio: Optional[float] = 2.0
    min_class_count: int = 10
    rank_by: str = "iterations"
    rhs_policy: str = "manufactured"
    repeats: int = 3

    def __post_init__(self):
        self.families = tuple(self.families)
        for name in ("epsilon", "peclet", "diffusion", "reaction"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise SpecError(f"{name} range must satisfy 0 < lo <= hi")
            setattr(self, name, (float(lo), float(hi)))
        if self.count < 1:
            raise SpecError("count must be >= 1")
        if not (CORPUS_ORDER_BOUNDS[0] <= self.order_min <= self.order_max
                <= CORPUS_ORDER_BOUNDS[1]):
            raise SpecError(f"order range must lie within {CORPUS_ORDER_BOUNDS}")
        unknown = set(self.families) - set(FAMILIES)
        if unknown or not self.families:
            raise SpecError(f"unknown families {sorted(unknown)}")
        self.family_weights = {k: float(v) for k, v in dict(self.family_weights or {}).items()}
        w = self.weights()
        if min(w) < 0 or sum(w) <= 0:
            raise SpecError("family weights must be non-negative with a positive sum")

    def weights(self) -> list:
        return [self.family_weights.get(f, 1.0) for f in self.families]

    @classmethod
    def from_toml(cls, path, **overrides) -> "GenerationConfig":
        data = _load_toml(path)
        data = dict(data.get("generation", data))
        data.update({k: v for k, v in overrides.items() if v is not None})
        for key in ("families", "epsilon", "peclet", "diffusion", "reaction"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


def _load_toml(path) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _log_uniform(rng, lo, hi):
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def sample_spec(rng: np.random.Generator, gen: GenerationConfig, seed: int) -> PdeSpec:
    w = np.asarray(gen.weights())
    family = gen.families[int(rng.choice(len(gen.families), p=w / w.sum()))]
    n_target = int(rng.integers(gen.order_min, gen.order_max + 1))
    aspect = _log_uniform(rng, 0.5, 2.0)
    nx = max(1, int(round(math.sqrt(n_target * aspect))))
    ny = max(1, int(round(n_target / nx)))
    ny = min(max(ny, -(-gen.order_min // nx)), gen.order_max // nx)
    kw = {"diffusion": _log_uniform(rng, *gen.diffusion)}
    if rng.uniform() < gen.reaction_prob:
        kw["reaction"] = kw["diffusion"] * _log_uniform(rng, *gen.reaction)
    if family == "anisotropic":
        kw["epsilon"] = _log_uniform(rng, *gen.epsilon)
    elif family == "convdiff":
        theta = rng.uniform(0.0, 2.0 * math.pi)
        kw.update(cx=math.cos(theta), cy=math.sin(theta),
                  peclet=_log_uniform(rng, *gen.peclet))
    spec = PdeSpec(family, nx, ny, seed=seed, **kw)
    spec.validate((gen.order_min, gen.order_max))
    return spec


def rebalance(labels: Sequence[int], max_ratio: float, rng: np.random.Generator) -> list:
    """Indices kept after downsampling every class to ``max_ratio`` x the rarest.

    Kept indices are returned in their original order.
    """
    counts = Counter(labels)
    if not counts:
        return []
    cap = int(math.floor(max_ratio * min(counts.values())))
    keep = []
    for cls in sorted(counts):
        members = [i for i, y in enumerate(labels) if y == cls]
        if len(members) > cap:
            members = sorted(rng.choice(members, size=cap, replace=False).tolist())
        keep.extend(members)
    return sorted(keep)


@dataclass
class ManifestEntry:
    matrix_id: str
    path: str
    record: LabelRecord
    spec: Optional[PdeSpec] = None
    order: int = 0
    nnz: int = 0
    fingerprint: str = ""

    def to_dict(self) -> dict:
        return {
            "matrix_id": self.matrix_id,
            "path": self.path,
            "order": self.order,
            "nnz": self.nnz,
            "catalog_fingerprint": self.fingerprint,
            "pde": self.spec.to_dict() if self.spec is not None else None,
            "label": self.record.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        spec = PdeSpec(**d["pde"]) if d.get("pde") else None
        return cls(d["matrix_id"], d["path"], LabelRecord.from_dict(d["label"]), spec,
                   int(d.get("order", 0)), int(d.get("nnz", 0)),
                   d.get("catalog_fingerprint", ""))


@dataclass
class CorpusManifest:
    entries: list
    catalog: MethodCatalog
    dropped_unlabelable: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return self.catalog.fingerprint

    @property
    def class_histogram(self) -> dict:
        hist = Counter(e.record.optimal_index for e in self.entries
                       if e.record.optimal_index is not None)
        return {self.catalog[i].name: hist[i] for i in sorted(hist)}

    @property
    def class_ratio(self) -> float:
        counts = [c for c in self.class_histogram.values() if c > 0]
        return max(counts) / min(counts) if counts else float("nan")

    def labeled(self) -> list:
        return [e for e in self.entries if not e.record.unlabelable]

    def write(self, path) -> None:
        path = Path(path)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for e in self.entries:
                fh.write(json.dumps(e.to_dict(), sort_keys=True, separators=(",", ":")))
                fh.write("\n")
        with open(path.with_name("catalog.json"), "w", encoding="utf-8", newline="\n") as fh:
            json.dump({"fingerprint": self.fingerprint,
                       "entries": [list(m) for m in self.catalog.entries]}, fh, indent=2)
            fh.write("\n")

    @classmethod
    def read(cls, path) -> "CorpusManifest":
        path = Path(path)
        with open(path.with_name("catalog.json"), encoding="utf-8") as fh:
            cat = json.load(fh)
        catalog = MethodCatalog.from_json(cat["entries"])
        entries = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    entries.append(ManifestEntry.from_dict(json.loads(line)))
        for e in entries:
            if e.fingerprint and e.fingerprint != catalog.fingerprint:
                from .exceptions import CatalogMismatch
                raise CatalogMismatch(f"{e.matrix_id}: fingerprint {e.fingerprint} "
                                      f"!= catalog {catalog.fingerprint}")
        return cls(entries, catalog)

    def resolve(self, entry: ManifestEntry, manifest_path) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else Path(manifest_path).parent / p


def worker_count() -> int:
    env = os.environ.get("RAF_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _generate_one(args):
    spec, matrix_id, catalog, cfg, gen = args
    A = generate(spec)
    rec = label_matrix(A, catalog, cfg, gen.rhs_policy, rank_by=gen.rank_by,
                       repeats=gen.repeats, matrix_id=matrix_id, seed=spec.seed)
    return A, rec


def map_parallel(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=1))


def trim_to(labels: Sequence[int], keep: list, count: int) -> list:
    """Shrink ``keep`` to ``count`` indices by dropping from the largest class.

    The last member of the currently largest class (lowest label on ties)
    goes first, so class ratios never grow.
    """
    by_class = {}
    for i in keep:
        by_class.setdefault(labels[i], []).append(i)
    excess = len(keep) - count
    while excess > 0:
        cls = max(sorted(by_class), key=lambda c: len(by_class[c]))
        by_class[cls].pop()
        excess -= 1
    return sorted(i for members in by_class.values() for i in members)


def select_corpus(labels: Sequence[int], gen: GenerationConfig) -> list:
    """Indices of labeled samples that form the corpus.

    Classes rarer than ``gen.min_class_count`` are dropped, the rest are
    rebalanced to ``gen.balance_ratio`` and trimmed to ``gen.count``.
    """
    counts = Counter(labels)
    floor = max(gen.min_class_count, 1)
    keep = [i for i, y in enumerate(labels) if counts[y] >= floor]
    if gen.balance_ratio is not None and keep:
        # a fixed generator keeps the choice independent of how many rounds ran
        rng = np.random.default_rng([gen.seed, 1])
        sub = rebalance([labels[i] for i in keep], gen.balance_ratio, rng)
        keep = [keep[j] for j in sub]
    return trim_to(labels, keep, gen.count) if len(keep) > gen.count else keep


MAX_ROUNDS = 12


def generate_corpus(gen: GenerationConfig, catalog: MethodCatalog, cfg: SolveConfig,
                    out_dir=None, *, workers: Optional[int] = None) -> CorpusManifest:
    """Sample, generate and label matrices until ``gen.count`` survive selection.

    Sampling runs in rounds (``gen.count`` specs first, then half that per
    round).  Unlabelable matrices are dropped, then the pool goes through
    :func:`select_corpus`.  If the target is still out of reach after
    ``MAX_ROUNDS`` rounds the smaller corpus is kept with a warning.  With
    ``out_dir`` the matrices and ``manifest.jsonl`` are written there.
    """
    rng = np.random.default_rng(gen.seed)
    workers = workers or worker_count()
    pool, dropped, sampled = [], 0, 0
    chosen = []
    for round_no in range(MAX_ROUNDS):
        batch = gen.count if round_no == 0 else -(-gen.count // 2)
        specs = [sample_spec(rng, gen, seed=int(rng.integers(2**31))) for _ in range(batch)]
        ids = [f"m{sampled + i:05d}_{s.family}" for i, s in enumerate(specs)]
        sampled += batch
        jobs = [(s, i, catalog, cfg, gen) for s, i in zip(specs, ids)]
        for spec, mid, (A, rec) in zip(specs, ids, map_parallel(_generate_one, jobs, workers)):
            if rec.unlabelable:
                dropped += 1
                log.info("dropping unlabelable matrix %s", mid)
                continue
            pool.append((mid, spec, A, rec))
        chosen = select_corpus([p[3].optimal_index for p in pool], gen)
        log.info("round %d: %d sampled, %d labeled, %d selected", round_no + 1, sampled,
                 len(pool), len(chosen))
        if len(chosen) >= gen.count:
            break
    else:
        log.warning("only %d of %d requested matrices after %d rounds", len(chosen),
                    gen.count, MAX_ROUNDS)

    picked = [pool[i] for i in chosen]
    entries = [ManifestEntry(mid, f"matrices/{mid}.mtx", rec, spec, A.order, A.nnz,
                             catalog.fingerprint) for mid, spec, A, rec in picked]
    manifest = CorpusManifest(entries, catalog, dropped, {"sampled": sampled})
    if len(manifest.class_histogram) < 2:
        log.warning("corpus has fewer than two label classes: %s", manifest.class_histogram)

    if out_dir is not None:
        out = Path(out_dir)
        (out / "matrices").mkdir(parents=True, exist_ok=True)
        for (mid, _, A, _), e in zip(picked, entries):
            write_matrix_market(out / e.path, A, comments=[f"rafsel {mid}"])
        manifest.write(out / "manifest.jsonl")
    return manifest


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
