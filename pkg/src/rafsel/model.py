"""Fusion network, the :class:`RafSelector` estimator and ``.rafm`` model files.

The network has a convolutional branch over the relative image planes and a
small dense branch over the absolute scalars.  The two 256-wide embeddings
are concatenated and classified into one of ``k`` catalog methods.  In
baseline mode the image gets a third (blue) plane and the dense branch is
removed.
"""
from __future__ import annotations

import json
import logging
import struct
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from . import nn
from .exceptions import CatalogMismatch, ConfigError, FormatError, ShapeError, VersionError
from .features import ABSOLUTE_NAMES, N_ABSOLUTE, split_rows

log = logging.getLogger(__name__)

EMBED_WIDTH = 256
CONV1_FILTERS = 32
CONV2_FILTERS = 64
FULL_MASK = (True,) * N_ABSOLUTE


def _mask_tuple(mask) -> tuple:
    if mask is None:
        return FULL_MASK
    mask = tuple(bool(v) for v in mask)
    if len(mask) != N_ABSOLUTE:
        raise ConfigError(f"feature_mask needs {N_ABSOLUTE} entries, got {len(mask)}")
    return mask


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and training hyperparameters."""

    m: int = 64
    k: int = 15
    feature_mask: tuple = FULL_MASK
    baseline_mode: bool = False
    strict_width: bool = False
    h1: int = 64
    h2: int = 256
    dropout: float = 0.5
    learning_rate: float = 8e-4
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    zero_head: bool = False

    def __post_init__(self):
        object.__setattr__(self, "feature_mask", _mask_tuple(self.feature_mask))

    def validate(self) -> "ModelConfig":
        if self.m < 4 or self.m % 4:
            raise ConfigError(f"resolution m={self.m} must be a positive multiple of 4")
        if self.k < 2:
            raise ConfigError("k must be at least 2")
        if min(self.h1, self.h2, self.batch_size, self.max_epochs) < 1:
            raise ConfigError("widths, batch size and epoch cap must be positive")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        return self

    @property
    def in_channels(self) -> int:
        return 3 if self.baseline_mode else 2

    @property
    def absolute_width(self) -> int:
        """Input width of the dense branch (0 in baseline mode)."""
        if self.baseline_mode:
            return 0
        return sum(self.feature_mask) if self.strict_width else N_ABSOLUTE

    @property
    def flatten_width(self) -> int:
        return CONV2_FILTERS * (self.m // 4) ** 2

    @property
    def fused_width(self) -> int:
        return EMBED_WIDTH if self.baseline_mode else 2 * EMBED_WIDTH


class FusionNet:
    """Two-branch classifier with hand-written backward passes."""

    def __init__(self, config: ModelConfig):
        self.config = cfg = config.validate()
        seeds = np.random.SeedSequence(cfg.seed).spawn(2)
        init = np.random.default_rng(seeds[0])
        self.conv = nn.Sequential([
            # the first convolution never needs an input gradient
            nn.Conv2D(cfg.in_channels, CONV1_FILTERS, rng=init, input_grad=False),
            nn.ReLU(), nn.MaxPool2x2(),
            nn.Conv2D(CONV1_FILTERS, CONV2_FILTERS, rng=init), nn.ReLU(), nn.MaxPool2x2(),
            nn.Flatten(),
            nn.Linear(cfg.flatten_width, EMBED_WIDTH, rng=init), nn.ReLU(),
        ])
        self.absolute = None
        if not cfg.baseline_mode:
            self.absolute = nn.Sequential([
                nn.Linear(cfg.absolute_width, cfg.h1, rng=init), nn.ReLU(),
                nn.Linear(cfg.h1, EMBED_WIDTH, rng=init), nn.ReLU(),
            ])
        self.dropout = nn.Dropout(cfg.dropout, rng=np.random.default_rng(seeds[1]))
        self.head = nn.Sequential([
            nn.Linear(cfg.fused_width, cfg.h2, rng=init), nn.ReLU(), self.dropout,
            nn.Linear(cfg.h2, cfg.k, rng=init, zero=cfg.zero_head),
        ])

    def branches(self):
        out = [("conv", self.conv)]
        if self.absolute is not None:
            out.append(("abs", self.absolute))
        out.append(("head", self.head))
        return out

    def named_params(self):
        """Yield (name, layer, key) in a fixed order."""
        for prefix, seq in self.branches():
            yield from seq.named_params(prefix + ".")

    def param_arrays(self) -> list:
        return [layer.params[k] for _, layer, k in self.named_params()]

    def grad_arrays(self) -> list:
        return [layer.grads[k] for _, layer, k in self.named_params()]

    def param_shapes(self) -> dict:
        return {name: layer.params[k].shape for name, layer, k in self.named_params()}

    def zero_grad(self):
        for _, seq in self.branches():
            seq.zero_grad()

    def forward(self, images, absolute=None, train=False):
        cfg = self.config
        if images.ndim != 4 or images.shape[1:] != (cfg.in_channels, cfg.m, cfg.m):
            raise ShapeError(f"expected images of shape (B, {cfg.in_channels}, {cfg.m}, "
                             f"{cfg.m}), got {images.shape}")
        parts = [self.conv.forward(images, train)]
        if self.absolute is not None:
            if absolute is None or absolute.shape != (images.shape[0], cfg.absolute_width):
                raise ShapeError(f"expected absolute input of width {cfg.absolute_width}")
            parts.append(self.absolute.forward(absolute, train))
        fused = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=1)
        return self.head.forward(fused, train)

    def backward(self, dlogits):
        dfused = self.head.backward(dlogits)
        self.conv.backward(dfused[:, :EMBED_WIDTH])
        if self.absolute is not None:
            self.absolute.backward(dfused[:, EMBED_WIDTH:])

    def describe(self) -> dict:
        """Shape walk of one sample through the network."""
        cfg = self.config
        q = cfg.m // 4
        return {
            "input": (cfg.in_channels, cfg.m, cfg.m),
            "conv1": (CONV1_FILTERS, cfg.m, cfg.m),
            "pool1": (CONV1_FILTERS, cfg.m // 2, cfg.m // 2),
            "conv2": (CONV2_FILTERS, cfg.m // 2, cfg.m // 2),
            "pool2": (CONV2_FILTERS, q, q),
            "flatten": cfg.flatten_width,
            "image_embedding": EMBED_WIDTH,
            "absolute_input": None if cfg.baseline_mode else cfg.absolute_width,
            "absolute_embedding": None if cfg.baseline_mode else EMBED_WIDTH,
            "fused": cfg.fused_width,
            "hidden": cfg.h2,
            "output": cfg.k,
        }


def build_model(config: ModelConfig) -> FusionNet:
    return FusionNet(config)


# ---------------------------------------------------------------------------
# input preparation
# ---------------------------------------------------------------------------

def signed_log(x: np.ndarray) -> np.ndarray:
    """sign(x) * log(1 + |x|): compresses the spread of the absolute values."""
    return np.sign(x) * np.log1p(np.abs(x))


@dataclass
class AbsoluteScaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, absolute: np.ndarray) -> "AbsoluteScaler":
        t = signed_log(absolute)
        std = t.std(axis=0)
        return cls(t.mean(axis=0), np.where(std > 0, std, 1.0))

    @classmethod
    def identity(cls) -> "AbsoluteScaler":
        return cls(np.zeros(N_ABSOLUTE), np.ones(N_ABSOLUTE))

    def transform(self, absolute: np.ndarray) -> np.ndarray:
        return (signed_log(absolute) - self.mean) / self.std


def prepare_inputs(X, config: ModelConfig, scaler: Optional[AbsoluteScaler]):
    """Flat feature rows to (images scaled to [0, 1], branch-ready absolute input)."""
    images, absolute = split_rows(X, config.baseline_mode)
    if images.shape[-1] != config.m:
        raise ShapeError(f"feature resolution {images.shape[-1]} does not match model m={config.m}")
    images = images / 255.0
    if config.baseline_mode:
        return images, None
    z = (scaler or AbsoluteScaler.identity()).transform(absolute)
    mask = np.array(config.feature_mask)
    if config.strict_width:
        return images, np.ascontiguousarray(z[:, mask])
    z[:, ~mask] = 0.0
    return images, z


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def stratified_split(y: Sequence[int], fractions=(0.70, 0.15, 0.15), seed: int = 0):
    """Seeded per-class split into index arrays, one per fraction.

    Each class is shuffled and cut proportionally; leftovers from rounding go
    to the first part, so every class with enough members appears in each.
    """
    fractions = np.asarray(fractions, dtype=float)
    if fractions.ndim != 1 or np.any(fractions < 0) or not np.isclose(fractions.sum(), 1.0):
        raise ConfigError("split fractions must be non-negative and sum to 1")
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    parts = [[] for _ in fractions]
    for cls in np.unique(y):
        members = rng.permutation(np.flatnonzero(y == cls))
        sizes = [int(round(f * len(members))) for f in fractions[1:]]
        first = len(members) - sum(sizes)
        if first < 0:
            sizes[-1] += first
            first = 0
        cuts = np.cumsum([first] + sizes)[:-1]
        for part, chunk in zip(parts, np.split(members, cuts)):
            part.extend(chunk.tolist())
    return tuple(np.array(sorted(p), dtype=np.int64) for p in parts)


class EarlyStopping:
    """Track the best validation loss and decide when to stop.

    ``update`` returns True once ``patience`` epochs have passed without a
    strict improvement.
    """

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch = 0
        self.best_params = None
        self.waited = 0

    def update(self, epoch: int, loss: float, params: list) -> bool:
        if loss < self.best_loss:
            self.best_loss, self.best_epoch = loss, epoch
            self.best_params = [p.copy() for p in params]
            self.waited = 0
            return False
        self.waited += 1
        return self.waited >= self.patience

    def restore(self, params: list) -> None:
        if self.best_params is not None:
            for p, best in zip(params, self.best_params):
                p[...] = best


def batch_loss(net: FusionNet, images, absolute, y, batch_size=256):
    """Mean cross-entropy and predictions in inference mode."""
    total, preds = 0.0, []
    for s in range(0, len(y), batch_size):
        sl = slice(s, s + batch_size)
        logits = net.forward(images[sl], None if absolute is None else absolute[sl])
        loss, _ = nn.softmax_cross_entropy(logits, y[sl])
        total += loss * len(y[sl])
        preds.append(logits.argmax(axis=1))
    return total / len(y), np.concatenate(preds)


def fit_network(net: FusionNet, train, val, *, shuffle_seed=None):
    """Mini-batch Adam with early stopping on validation loss.

    ``train`` and ``val`` are (images, absolute, labels) triples already
    prepared for the network.  Returns the per-epoch history; the network is
    left holding the best-epoch parameters.
    """
    cfg = net.config
    images, absolute, y = train
    n = len(y)
    batch = cfg.batch_size
    if n < batch:
        warnings.warn(f"only {n} training samples; batch size reduced from {batch}",
                      RuntimeWarning, stacklevel=2)
        batch = n
    absent = sorted(set(range(cfg.k)) - set(np.unique(y).tolist()))
    if absent and len(absent) < cfg.k:
        log.debug("classes absent from the training split: %s", absent)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed if shuffle_seed is None
                                                       else shuffle_seed).spawn(3)[2])
    params = net.param_arrays()
    opt = nn.Adam(params, lr=cfg.learning_rate)
    stopper = EarlyStopping(cfg.patience)
    history = []
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        running = 0.0
        for s in range(0, n, batch):
            idx = order[s:s + batch]
            net.zero_grad()
            logits = net.forward(images[idx], None if absolute is None else absolute[idx],
                                 train=True)
            loss, dlogits = nn.softmax_cross_entropy(logits, y[idx])
            net.backward(dlogits)
            opt.step(net.grad_arrays())
            running += loss * len(idx)
        val_loss, val_pred = batch_loss(net, *val)
        row = {"epoch": epoch, "train_loss": running / n, "val_loss": val_loss,
               "val_accuracy": float(np.mean(val_pred == val[2]))}
        history.append(row)
        log.debug("epoch %d train_loss %.4f val_loss %.4f val_acc %.3f", epoch,
                 row["train_loss"], val_loss, row["val_accuracy"])
        if stopper.update(epoch, val_loss, params):
            break
    stopper.restore(params)
    return history, stopper.best_epoch


# ---------------------------------------------------------------------------
# estimator
# ---------------------------------------------------------------------------

class RafSelector(ClassifierMixin, BaseEstimator):
    """Predict the fastest (solver, preconditioner) pair from feature rows.

    Rows come from :class:`~rafsel.features.RafExtractor` (two planes plus six
    absolute values) or, with ``baseline_mode=True``, from
    :class:`~rafsel.features.BaselineExtractor`.  Labels are catalog indices
    in ``range(k)``.

    Parameters
    ----------
    k : int
        Catalog size, i.e. the number of output classes.
    feature_mask : sequence of 6 bool, optional
        Which absolute values the model may see.  Masked values are zeroed
        after standardization, or dropped from the input when
        ``strict_width`` is set.
    catalog : sequence of str, optional
        Method names; their fingerprint is stored and checked at evaluation.
    validation_fraction : float
        Share of the training rows held out for early stopping when
        ``fit`` receives no ``eval_set``.
    """

    def __init__(self, k=15, feature_mask=None, baseline_mode=False, strict_width=False,
                 h1=64, h2=256, dropout=0.5, learning_rate=8e-4, batch_size=64,
                 max_epochs=100, patience=10, random_state=0, zero_head=False,
                 catalog=None, validation_fraction=0.15, order_range=None):
        self.k = k
        self.feature_mask = feature_mask
        self.baseline_mode = baseline_mode
        self.strict_width = strict_width
        self.h1 = h1
        self.h2 = h2
        self.dropout = dropout
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.random_state = random_state
        self.zero_head = zero_head
        self.catalog = catalog
        self.validation_fraction = validation_fraction
        self.order_range = order_range

    def _config(self, m: int) -> ModelConfig:
        return ModelConfig(
            m=m, k=self.k, feature_mask=_mask_tuple(self.feature_mask),
            baseline_mode=self.baseline_mode, strict_width=self.strict_width,
            h1=self.h1, h2=self.h2, dropout=self.dropout, learning_rate=self.learning_rate,
            batch_size=self.batch_size, max_epochs=self.max_epochs, patience=self.patience,
            seed=self.random_state, zero_head=self.zero_head).validate()

    @property
    def fingerprint(self) -> Optional[str]:
        if self.catalog is None:
            return None
        from .solvers import catalog_for
        return catalog_for(self.catalog).fingerprint

    def _check_labels(self, y):
        y = np.asarray(y, dtype=np.int64)
        if y.ndim != 1:
            raise ShapeError("labels must be a 1-D array of catalog indices")
        if y.size and (y.min() < 0 or y.max() >= self.k):
            raise ConfigError(f"labels must lie in [0, {self.k})")
        return y

    def initialize(self, m: int) -> "RafSelector":
        """Build an untrained network for resolution ``m`` (identity scaling)."""
        self.config_ = self._config(m)
        self.net_ = build_model(self.config_)
        self.scaler_ = AbsoluteScaler.identity()
        self.classes_ = np.arange(self.k)
        self.history_, self.best_epoch_ = [], 0
        return self

    def fit(self, X, y, eval_set=None):
        """Train on flat rows ``X`` with catalog-index labels ``y``.

        ``eval_set=(X_val, y_val)`` supplies the early-stopping split; when
        omitted a stratified ``validation_fraction`` of ``X`` is held out.
        """
        X = np.asarray(X, dtype=np.float64)
        y = self._check_labels(y)
        if eval_set is None:
            f = self.validation_fraction
            tr, va = stratified_split(y, (1.0 - f, f), seed=self.random_state)
            if len(va) == 0:
                raise ConfigError("too few samples to hold out a validation split")
            X, Xv, y, yv = X[tr], X[va], y[tr], y[va]
        else:
            Xv, yv = np.asarray(eval_set[0], dtype=np.float64), self._check_labels(eval_set[1])
        images, absolute = split_rows(X, self.baseline_mode)
        self.initialize(images.shape[-1])
        if not self.baseline_mode:
            self.scaler_ = AbsoluteScaler.fit(absolute)
        train = (*prepare_inputs(X, self.config_, self.scaler_), y)
        val = (*prepare_inputs(Xv, self.config_, self.scaler_), yv)
        self.history_, self.best_epoch_ = fit_network(self.net_, train, val)
        return self

    def _require_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("RafSelector is not fitted; call fit or initialize first")

    def decision_function(self, X) -> np.ndarray:
        self._require_fitted()
        images, absolute = prepare_inputs(np.asarray(X, dtype=np.float64), self.config_,
                                          self.scaler_)
        out = []
        for s in range(0, len(images), 256):
            sl = slice(s, s + 256)
            out.append(self.net_.forward(images[sl], None if absolute is None else absolute[sl]))
        return np.concatenate(out) if out else np.zeros((0, self.k))

    def predict_proba(self, X) -> np.ndarray:
        return nn.softmax(self.decision_function(X))

    def rank(self, X) -> np.ndarray:
        """Method indices per row, most probable first; ties keep catalog order."""
        p = self.predict_proba(X)
        return np.argsort(-p, axis=1, kind="stable")

    def predict(self, X) -> np.ndarray:
        return self.rank(X)[:, 0]

    def check_fingerprint(self, fingerprint: Optional[str]) -> None:
        mine = self.fingerprint
        if fingerprint is not None and mine is not None and fingerprint != mine:
            raise CatalogMismatch(f"model catalog {mine} does not match data catalog {fingerprint}")


# ---------------------------------------------------------------------------
# .rafm files
# ---------------------------------------------------------------------------

RAFM_MAGIC = b"RAFM"
RAFM_VERSION = 1
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


def _estimator_config(model: RafSelector) -> dict:
    params = model.get_params()
    params["feature_mask"] = list(_mask_tuple(params["feature_mask"]))
    if params["catalog"] is not None:
        params["catalog"] = list(params["catalog"])
    if params["order_range"] is not None:
        params["order_range"] = [int(v) for v in params["order_range"]]
    return {"m": model.config_.m, "params": params, "best_epoch": model.best_epoch_,
            "absolute_names": list(ABSOLUTE_NAMES), "optimizer": {
                "name": "adam", "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}}


def encode_model(model: RafSelector) -> bytes:
    model._require_fitted()
    out = [RAFM_MAGIC, _U16.pack(RAFM_VERSION)]
    cfg = json.dumps(_estimator_config(model), sort_keys=True, separators=(",", ":")).encode()
    out += [_U32.pack(len(cfg)), cfg]
    fp = (model.fingerprint or "").encode("ascii")
    out += [_U16.pack(len(fp)), fp]
    out += [_U32.pack(len(model.scaler_.mean)),
            np.asarray(model.scaler_.mean, "<f8").tobytes(),
            np.asarray(model.scaler_.std, "<f8").tobytes()]
    named = list(model.net_.named_params())
    out.append(_U32.pack(len(named)))
    for name, layer, key in named:
        arr = np.ascontiguousarray(layer.params[key], dtype="<f8")
        nb = name.encode()
        out += [_U16.pack(len(nb)), nb, bytes([arr.ndim])]
        out += [_U32.pack(d) for d in arr.shape]
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("model file is truncated")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))[0]


def decode_model(blob: bytes) -> RafSelector:
    r = _Reader(blob)
    if r.take(4) != RAFM_MAGIC:
        raise FormatError("not a RAFM model file")
    version = r.unpack(_U16)
    if version != RAFM_VERSION:
        raise VersionError(f"model file version {version}, expected {RAFM_VERSION}")
    try:
        cfg = json.loads(r.take(r.unpack(_U32)).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt model config block: {exc}") from exc
    fingerprint = r.take(r.unpack(_U16)).decode("ascii")
    n_abs = r.unpack(_U32)
    mean = np.frombuffer(r.take(8 * n_abs), "<f8").copy()
    std = np.frombuffer(r.take(8 * n_abs), "<f8").copy()
    model = RafSelector(**cfg["params"])
    if (model.fingerprint or "") != fingerprint:
        raise FormatError("stored fingerprint disagrees with the stored catalog")
    model.initialize(cfg["m"])
    model.scaler_ = AbsoluteScaler(mean, std)
    model.best_epoch_ = cfg.get("best_epoch", 0)
    named = list(model.net_.named_params())
    if r.unpack(_U32) != len(named):
        raise FormatError("parameter count does not match the architecture")
    for name, layer, key in named:
        stored = r.take(r.unpack(_U16)).decode()
        ndim = r.take(1)[0]
        shape = tuple(r.unpack(_U32) for _ in range(ndim))
        target = layer.params[key]
        if stored != name or shape != target.shape:
            raise FormatError(f"parameter {stored} {shape} does not fit {name} {target.shape}")
        target[...] = np.frombuffer(r.take(8 * target.size), "<f8").reshape(shape)
    if r.pos != len(blob):
        raise FormatError("trailing bytes after the last parameter")
    return model


def save_model(path, model: RafSelector) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_model(model))


def load_model(path) -> RafSelector:
    with open(path, "rb") as fh:
        return decode_model(fh.read())
