"""Command-line entry point: ``rafsel <command> [options]``.

Commands: gen, label, extract, render, train, predict, eval, ablate.  Every
command accepts ``--config FILE.toml``; values there are overridden by
flags given on the command line.  ``RAF_THREADS`` sets the worker count for
per-matrix stages.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .exceptions import RafError
from .features import ABSOLUTE_NAMES, DEFAULT_RESOLUTION, DatasetOrderStats, save_png
from .generator import (FAMILIES, CorpusManifest, GenerationConfig, ManifestEntry,
                        _load_toml, generate_corpus, map_parallel, worker_count)
from .solvers import (RANK_MODES, RHS_POLICIES, MethodCatalog, SolveConfig, catalog_for,
                      label_matrix)
from .sparse import read_matrix_market

log = logging.getLogger("rafsel")

DEFAULT_SEED = 0
SOLVER_KEYS = ("rtol", "max_iters", "timeout", "gmres_restart", "omega", "block_size", "divtol")
MODEL_KEYS = ("h1", "h2", "dropout", "learning_rate", "batch_size", "max_epochs", "patience",
              "strict_width")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _section(args, name: str) -> dict:
    return dict(args.toml.get(name, {}))


def _merge(args, name: str, keys) -> dict:
    """TOML section ``name`` overlaid with any flags the user actually passed."""
    out = {k: v for k, v in _section(args, name).items() if k in keys}
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def solve_config(args) -> SolveConfig:
    return SolveConfig(**_merge(args, "solver", SOLVER_KEYS))


def catalog_from(args) -> MethodCatalog:
    names = getattr(args, "catalog", None) or _section(args, "catalog").get("methods")
    if not names:
        return MethodCatalog.default()
    if isinstance(names, str):
        names = [n for n in names.split(",") if n]
    return catalog_for(names)


def parse_mask(text):
    """``--mask min_a,order`` hides those absolute values."""
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        hidden = list(text)
    else:
        hidden = [t.strip() for t in text.split(",") if t.strip()]
    if hidden == ["all"]:
        hidden = list(ABSOLUTE_NAMES)
    unknown = set(hidden) - set(ABSOLUTE_NAMES)
    if unknown:
        raise RafError(f"unknown absolute features {sorted(unknown)}; "
                       f"choose from {', '.join(ABSOLUTE_NAMES)}")
    return tuple(n not in hidden for n in ABSOLUTE_NAMES)


def log_config(command: str, resolved: dict) -> None:
    log.info("%s config %s", command, json.dumps(resolved, sort_keys=True, default=str))


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return dataclasses.asdict(obj)
    return obj


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    keys = [f.name for f in dataclasses.fields(GenerationConfig)]
    data = _merge(args, "generation", keys)
    data.setdefault("seed", args.seed)
    for key in ("families", "epsilon", "peclet", "diffusion", "reaction"):
        if key in data:
            data[key] = tuple(data[key])
    gen = GenerationConfig(**data)
    cfg = solve_config(args)
    catalog = catalog_from(args)
    log_config("gen", {"generation": _jsonable(gen), "solver": _jsonable(cfg),
                       "catalog": catalog.names, "workers": worker_count(), "out": args.out})
    manifest = generate_corpus(gen, catalog, cfg, args.out)
    print(f"wrote {len(manifest.entries)} matrices to {args.out} "
          f"(dropped {manifest.dropped_unlabelable} unlabelable)")
    for name, count in manifest.class_histogram.items():
        print(f"  {name:<16} {count}")
    return 0


def _label_one(job):
    path, matrix_id, catalog, cfg, rhs, rank_by, repeats, seed = job
    try:
        A = read_matrix_market(path)
    except (RafError, OSError, UnicodeDecodeError) as exc:
        return matrix_id, None, None, f"{type(exc).__name__}: {exc}"
    rec = label_matrix(A, catalog, cfg, rhs, rank_by=rank_by, repeats=repeats,
                       matrix_id=matrix_id, seed=seed)
    return matrix_id, (A.order, A.nnz), rec, None


def cmd_label(args) -> int:
    cfg = solve_config(args)
    catalog = catalog_from(args)
    opts = _merge(args, "generation", ("rank_by", "rhs_policy", "repeats"))
    rank_by = opts.get("rank_by", "iterations")
    rhs = opts.get("rhs_policy", "manufactured")
    repeats = int(opts.get("repeats", 3))
    out = Path(args.out)
    files = sorted(Path(args.matrices).glob("*.mtx"))
    log_config("label", {"solver": _jsonable(cfg), "catalog": catalog.names, "rank_by": rank_by,
                         "rhs_policy": rhs, "repeats": repeats, "matrices": args.matrices,
                         "out": str(out), "seed": args.seed})
    jobs = [(p, p.stem, catalog, cfg, rhs, rank_by, repeats, args.seed) for p in files]
    entries, skipped = [], 0
    for mid, info, rec, err in map_parallel(_label_one, jobs, worker_count()):
        if err is not None:
            skipped += 1
            log.warning("skipping %s: %s", mid, err)
            continue
        rel = os.path.relpath(Path(args.matrices) / f"{mid}.mtx", out.parent)
        entries.append(ManifestEntry(mid, rel, rec, None, info[0], info[1],
                                     catalog.fingerprint))
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = CorpusManifest(entries, catalog)
    manifest.write(out)
    unl = sum(e.record.unlabelable for e in entries)
    print(f"labeled {len(entries)} matrices ({unl} unlabelable, {skipped} skipped) -> {out}")
    return 1 if skipped and args.strict else 0


def cmd_extract(args) -> int:
    from .dataset import extract_corpus

    opts = _merge(args, "extract", ("mode", "m"))
    mode, m = opts.get("mode", "raf"), int(opts.get("m", DEFAULT_RESOLUTION))
    out = args.out or str(Path(args.manifest).parent / "features")
    log_config("extract", {"manifest": args.manifest, "out": out, "mode": mode, "m": m,
                           "strict": args.strict, "workers": worker_count()})
    written, failures = extract_corpus(args.manifest, out, mode, m)
    print(f"extracted {len(written)} feature records to {out} ({len(failures)} failed)")
    return 1 if failures and args.strict else 0


def cmd_render(args) -> int:
    from .dataset import feature_record, order_range

    opts = _merge(args, "extract", ("mode", "m"))
    mode, m = opts.get("mode", "raf"), int(opts.get("m", DEFAULT_RESOLUTION))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.manifest:
        manifest = CorpusManifest.read(args.manifest)
        items = [(e.matrix_id, manifest.resolve(e, args.manifest)) for e in manifest.entries]
        orders = order_range(manifest)
    else:
        items = [(Path(p).stem, Path(p)) for p in args.matrix]
        orders = None
    log_config("render", {"mode": mode, "m": m, "out": str(out), "count": len(items)})
    mats, failed = [], 0
    for mid, path in items:
        try:
            mats.append((mid, read_matrix_market(path)))
        except (RafError, OSError) as exc:
            failed += 1
            log.error("cannot read %s: %s", path, exc)
    stats = None
    if mode == "baseline":
        if args.order_range:
            stats = DatasetOrderStats(*args.order_range)
        elif orders is not None:
            stats = DatasetOrderStats(*orders)
        else:
            stats = DatasetOrderStats.from_orders([A.order for _, A in mats])
    for mid, A in mats:
        rec = feature_record(A, mode, m, stats)
        save_png(out / f"{mid}.png", rec.channels)
    print(f"rendered {len(mats)} images to {out}")
    return 1 if failed else 0


def _selector_from(args, k: int, catalog, mode: str, order_rng):
    from .model import RafSelector

    params = _merge(args, "model", MODEL_KEYS)
    mask = parse_mask(getattr(args, "mask", None) or _section(args, "model").get("mask"))
    return RafSelector(k=k, feature_mask=mask, baseline_mode=mode == "baseline",
                       random_state=args.seed, catalog=list(catalog),
                       order_range=order_rng, **params)


def cmd_train(args) -> int:
    from .dataset import load_dataset
    from .metrics import evaluate
    from .model import save_model

    data = load_dataset(args.manifest, args.features)
    if len(data) == 0:
        raise RafError("no labeled feature records found")
    train, val, test = data.split(args.seed)
    est = _selector_from(args, len(data.catalog), data.catalog, data.mode, data.order_range)
    log_config("train", {"manifest": args.manifest, "features": args.features,
                         "model": args.model, "mode": data.mode, "samples": len(data),
                         "split": [len(train), len(val), len(test)],
                         "params": est.get_params()})
    est.fit(train.X, train.y, eval_set=(val.X, val.y))
    save_model(args.model, est)
    last = est.history_[-1]
    print(f"trained {len(est.history_)} epochs (best {est.best_epoch_}, "
          f"val_loss {min(h['val_loss'] for h in est.history_):.4f}); wrote {args.model}")
    if len(test):
        rep = evaluate(est, test.X, test.records, data.fingerprint)
        print(rep.table("test"))
        if args.report:
            Path(args.report).write_text(rep.to_json() + "\n", encoding="utf-8")
    log.debug("final epoch %s", last)
    return 0


def cmd_predict(args) -> int:
    from .dataset import feature_record
    from .model import load_model

    model = load_model(args.model)
    mode = "baseline" if model.baseline_mode else "raf"
    stats = DatasetOrderStats(*model.order_range) if model.order_range else None
    names = list(model.catalog) if model.catalog else [str(i) for i in range(model.k)]
    log_config("predict", {"model": args.model, "matrices": args.matrix, "top": args.top})
    status = 0
    for path in args.matrix:
        try:
            A = read_matrix_market(path)
        except (RafError, OSError) as exc:
            log.error("cannot read %s: %s", path, exc)
            status = 1
            continue
        row = feature_record(A, mode, model.config_.m, stats).row()[None, :]
        p = model.predict_proba(row)[0]
        ranking = np.argsort(-p, kind="stable")[: args.top]
        print(path)
        for r, i in enumerate(ranking, 1):
            print(f"  {r}. {names[i]:<16} {p[i]:.4f}")
    return status


def cmd_eval(args) -> int:
    from .dataset import load_dataset
    from .metrics import evaluate
    from .model import load_model

    model = load_model(args.model)
    data = load_dataset(args.manifest, args.features)
    if args.subset == "test":
        data = data.split(model.random_state)[2]
    log_config("eval", {"model": args.model, "manifest": args.manifest, "subset": args.subset,
                        "samples": len(data)})
    rep = evaluate(model, data.X, data.records, data.fingerprint, solve_config(args))
    print(rep.to_json())
    if args.json:
        Path(args.json).write_text(rep.to_json() + "\n", encoding="utf-8")
    if args.table:
        Path(args.table).write_text(rep.table(args.subset) + "\n", encoding="utf-8")
    return 0


def cmd_ablate(args) -> int:
    from .ablation import run_ablation
    from .dataset import load_dataset

    data = load_dataset(args.manifest, args.features, mode="raf")
    train, val, test = data.split(args.seed)
    base = _selector_from(args, len(data.catalog), data.catalog, "raf", None)
    log_config("ablate", {"seeds": args.seeds, "strict_width": not args.zero_mask,
                          "params": base.get_params()})
    rep = run_ablation(base, (train.X, train.y), (val.X, val.y), (test.X, test.y),
                       test.records, seeds=args.seeds, strict_width=not args.zero_mask)
    print(rep.table())
    if args.json:
        Path(args.json).write_text(rep.to_json() + "\n", encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _solver_flags(p):
    g = p.add_argument_group("solver")
    g.add_argument("--rtol", type=float, help="relative residual target (default 1e-6)")
    g.add_argument("--max-iters", dest="max_iters", type=int,
                   help="iteration cap (default min(10n, 20000))")
    g.add_argument("--timeout", type=float, help="per-solve wall-clock limit in seconds")
    g.add_argument("--gmres-restart", dest="gmres_restart", type=int, help="GMRES restart length")
    g.add_argument("--omega", type=float, help="relaxation for Jacobi and SSOR")
    g.add_argument("--block-size", dest="block_size", type=int, help="block Jacobi block size")
    g.add_argument("--divtol", type=float, help="residual growth factor that counts as divergence")
    g.add_argument("--catalog", help="comma-separated methods such as cg+ilu0,gmres+none")


def _label_flags(p):
    p.add_argument("--rank-by", dest="rank_by", choices=RANK_MODES,
                   help="rank methods by wall time or by deterministic operation count")
    p.add_argument("--rhs", dest="rhs_policy", choices=RHS_POLICIES,
                   help="right-hand side used for labeling")
    p.add_argument("--repeats", type=int, help="timing repeats per method (wall-time ranking)")


def _model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--epochs", dest="max_epochs", type=int, help="epoch cap (default 100)")
    g.add_argument("--patience", type=int, help="early-stopping patience (default 10)")
    g.add_argument("--batch-size", dest="batch_size", type=int, help="mini-batch size (default 64)")
    g.add_argument("--lr", dest="learning_rate", type=float, help="Adam learning rate (8e-4)")
    g.add_argument("--h1", type=int, help="hidden width of the absolute branch (64)")
    g.add_argument("--h2", type=int, help="hidden width of the classifier head (256)")
    g.add_argument("--dropout", type=float, help="head dropout rate (0.5)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file; command-line flags override it")
    common.add_argument("--seed", type=int, default=None,
                        help=f"global seed (default {DEFAULT_SEED})")
    common.add_argument("-v", "--verbose", action="count", default=0,
                        help="more logging (-vv for debug)")
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")

    parser = argparse.ArgumentParser(prog="rafsel", description=(
        "Pick an iterative method (Krylov solver + preconditioner) for a sparse matrix from "
        "image-like relative features fused with absolute value statistics."))
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen", parents=[common], help="generate and label a PDE matrix corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, help="corpus size after labeling and rebalancing (300)")
    p.add_argument("--families", nargs="+", choices=FAMILIES, help="PDE families to sample")
    p.add_argument("--order-min", dest="order_min", type=int, help="smallest matrix order")
    p.add_argument("--order-max", dest="order_max", type=int, help="largest matrix order")
    p.add_argument("--balance-ratio", dest="balance_ratio", type=float,
                   help="cap every class at this multiple of the rarest class")
    p.add_argument("--min-class-count", dest="min_class_count", type=int,
                   help="drop label classes with fewer members")
    _label_flags(p)
    _solver_flags(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("label", parents=[common], help="label a directory of .mtx files")
    p.add_argument("--matrices", required=True, help="directory containing *.mtx files")
    p.add_argument("--out", required=True, help="manifest path (manifest.jsonl)")
    p.add_argument("--strict", action="store_true", help="exit nonzero if any file is skipped")
    _label_flags(p)
    _solver_flags(p)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("extract", parents=[common], help="write .rafb feature records")
    p.add_argument("--manifest", required=True, help="manifest.jsonl")
    p.add_argument("--out", help="feature directory (default: features/ beside the manifest)")
    p.add_argument("--mode", choices=("raf", "baseline"), help="feature layout (raf)")
    p.add_argument("--m", type=int, help=f"image resolution (default {DEFAULT_RESOLUTION})")
    p.add_argument("--strict", action="store_true", help="exit nonzero if any matrix fails")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("render", parents=[common], help="write feature images as PNG")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest", help="render every manifest entry")
    src.add_argument("--matrix", nargs="+", help="render these .mtx files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--mode", choices=("raf", "baseline"), help="raf leaves blue at 0")
    p.add_argument("--m", type=int, help=f"image resolution (default {DEFAULT_RESOLUTION})")
    p.add_argument("--order-range", dest="order_range", nargs=2, type=int,
                   metavar=("N_MIN", "N_MAX"), help="order range for the baseline blue plane")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("train", parents=[common], help="train a selector on extracted features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True, help="directory of .rafb records")
    p.add_argument("--model", required=True, help="output .rafm path")
    p.add_argument("--mask", help="comma-separated absolute values to hide, or 'all'")
    p.add_argument("--strict-width", dest="strict_width", action="store_true", default=None,
                   help="drop hidden values from the input instead of zeroing them")
    p.add_argument("--report", help="write the test-split evaluation as JSON")
    _model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="rank methods for matrices")
    p.add_argument("--model", required=True)
    p.add_argument("--matrix", required=True, nargs="+", help=".mtx files")
    p.add_argument("--top", type=int, default=3, help="methods to print per matrix (3)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", parents=[common], help="evaluate a model on a labeled corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--subset", choices=("test", "all"), default="test",
                   help="held-out test split (recomputed from the model seed) or everything")
    p.add_argument("--json", help="write the report as JSON")
    p.add_argument("--table", help="write the report as an aligned text table")
    _solver_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common],
                       help="retrain with each absolute value hidden and compare")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--zero-mask", dest="zero_mask", action="store_true",
                   help="zero hidden values instead of shrinking the input width")
    p.add_argument("--json", help="write the report as JSON")
    _model_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.toml = _load_toml(args.config) if args.config else {}
        if args.seed is None:
            args.seed = int(args.toml.get("seed", DEFAULT_SEED))
        return args.func(args)
    except (RafError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
