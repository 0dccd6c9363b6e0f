"""Matrix-to-image encodings and the relative/absolute feature bundle.

Two encodings are provided:

* the conventional RGB image (red: normalized block averages, green: block
  density, blue: matrix order relative to the dataset), and
* the RAF bundle: red and green channels plus six absolute numbers that the
  relative channels throw away (value extrema, block-average extrema, matrix
  order and block order).

``RafExtractor`` and ``BaselineExtractor`` wrap both behind the scikit-learn
transformer API; they emit one flat float row per matrix so the result can
feed :class:`rafsel.model.RafSelector` directly or any other estimator.
"""
from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import EmptyMatrix, FormatError, ShapeError, VersionError
from .sparse import BlockGrid, CsrMatrix, block_partition, value_extrema

DEFAULT_RESOLUTION = 256

ABSOLUTE_NAMES = ("min_a", "max_a", "min_gamma", "max_gamma", "order", "block_order")
N_ABSOLUTE = len(ABSOLUTE_NAMES)


@dataclass(frozen=True, eq=False)
class ImageChannels:
    resolution: int
    red: np.ndarray
    green: np.ndarray
    blue: Optional[np.ndarray] = None

    def stack(self) -> np.ndarray:
        """(C, m, m) uint8 array: red, green and, if present, blue."""
        planes = [self.red, self.green] + ([self.blue] if self.blue is not None else [])
        return np.stack(planes).astype(np.uint8)

    def __eq__(self, other):
        if not isinstance(other, ImageChannels):
            return NotImplemented
        return np.array_equal(self.stack(), other.stack())

    __hash__ = None


@dataclass(frozen=True)
class AbsoluteFeatures:
    min_a: float
    max_a: float
    min_gamma: float
    max_gamma: float
    order: float
    block_order: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in ABSOLUTE_NAMES], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class RafFeatures:
    channels: ImageChannels
    absolute: AbsoluteFeatures

    @property
    def resolution(self) -> int:
        return self.channels.resolution


@dataclass(frozen=True)
class DatasetOrderStats:
    n_min: int
    n_max: int

    def __post_init__(self):
        if not (0 < self.n_min <= self.n_max):
            raise ValueError(f"need 0 < n_min <= n_max, got {self.n_min}, {self.n_max}")

    @classmethod
    def from_orders(cls, orders: Sequence[int]) -> "DatasetOrderStats":
        return cls(int(min(orders)), int(max(orders)))


# ---------------------------------------------------------------------------
# channels
# ---------------------------------------------------------------------------

def red_channel(grid: BlockGrid) -> np.ndarray:
    """Block averages min-max normalized onto 0..255 (floored).

    Empty blocks are 0.  If every occupied block has the same average the
    channel is all zeros.
    """
    occ = grid.occupied
    if not occ.any():
        raise EmptyMatrix("no occupied blocks")
    red = np.zeros(grid.nnz.shape, dtype=np.uint8)
    span = grid.gamma_max - grid.gamma_min
    if span > 0:
        red[occ] = np.floor((grid.gamma[occ] - grid.gamma_min) / span * 255)
    return red


def green_channel(grid: BlockGrid) -> np.ndarray:
    # exact integer floor of nnz/Nb^2 * 255; boundary blocks may exceed Nb^2
    cap = grid.block_order * grid.block_order
    g = (grid.nnz.astype(np.int64) * 255) // cap
    return np.minimum(g, 255).astype(np.uint8)


def blue_value(order: int, stats: DatasetOrderStats) -> int:
    if not stats.n_min <= order <= stats.n_max:
        warnings.warn(
            f"order {order} outside dataset range [{stats.n_min}, {stats.n_max}]; clamping",
            RuntimeWarning, stacklevel=2)
        order = min(max(order, stats.n_min), stats.n_max)
    if stats.n_max == stats.n_min:
        return 0
    return (order - stats.n_min) * 255 // (stats.n_max - stats.n_min)


def blue_channel(order: int, stats: DatasetOrderStats, m: int = 1) -> np.ndarray:
    return np.full((m, m), blue_value(order, stats), dtype=np.uint8)


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------

def extract_raf(A: CsrMatrix, m: int = DEFAULT_RESOLUTION) -> RafFeatures:
    A = A.canonicalize()
    grid = block_partition(A, m)
    ext = value_extrema(A)
    channels = ImageChannels(grid.resolution, red_channel(grid), green_channel(grid))
    absolute = AbsoluteFeatures(
        min_a=ext.min_val,
        max_a=ext.max_val,
        min_gamma=grid.gamma_min,
        max_gamma=grid.gamma_max,
        order=float(A.order),
        block_order=float(grid.block_order),
    )
    return RafFeatures(channels, absolute)


def extract_rgb_baseline(A: CsrMatrix, m: int, stats: DatasetOrderStats) -> ImageChannels:
    A = A.canonicalize()
    grid = block_partition(A, m)
    return ImageChannels(grid.resolution, red_channel(grid), green_channel(grid),
                         blue_channel(A.order, stats, grid.resolution))


# ---------------------------------------------------------------------------
# flat rows for estimators
# ---------------------------------------------------------------------------

def raf_row(feat: RafFeatures) -> np.ndarray:
    return np.concatenate([feat.channels.stack().ravel().astype(np.float64),
                           feat.absolute.as_array()])


def baseline_row(ch: ImageChannels) -> np.ndarray:
    return ch.stack().ravel().astype(np.float64)


def resolution_from_width(width: int, baseline: bool) -> int:
    n_img = width if baseline else width - N_ABSOLUTE
    planes = 3 if baseline else 2
    m = math.isqrt(max(n_img, 0) // planes)
    if m < 1 or planes * m * m != n_img:
        raise ShapeError(f"row width {width} does not match any resolution "
                         f"({'baseline' if baseline else 'raf'} layout)")
    return m


def split_rows(X, baseline: bool):
    """Split flat rows into (images (n, C, m, m), absolute (n, 6) or None)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"expected a 2-D feature array, got shape {X.shape}")
    m = resolution_from_width(X.shape[1], baseline)
    planes = 3 if baseline else 2
    images = X[:, :planes * m * m].reshape(-1, planes, m, m)
    absolute = None if baseline else X[:, planes * m * m:]
    return images, absolute


class RafExtractor(TransformerMixin, BaseEstimator):
    """Turn a sequence of :class:`CsrMatrix` into flat RAF feature rows.

    Each row holds the red and green planes (row-major, as 0..255 floats)
    followed by the six absolute values.
    """

    def __init__(self, m: int = DEFAULT_RESOLUTION):
        self.m = m

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return np.stack([raf_row(extract_raf(A, self.m)) for A in X])


class BaselineExtractor(TransformerMixin, BaseEstimator):
    """Conventional three-channel encoding; learns the order range in ``fit``."""

    def __init__(self, m: int = DEFAULT_RESOLUTION, n_min=None, n_max=None):
        self.m = m
        self.n_min = n_min
        self.n_max = n_max

    def fit(self, X, y=None):
        orders = [A.order for A in X]
        self.order_stats_ = DatasetOrderStats(
            self.n_min if self.n_min is not None else min(orders),
            self.n_max if self.n_max is not None else max(orders))
        return self

    def transform(self, X):
        stats = getattr(self, "order_stats_", None)
        if stats is None:
            from sklearn.exceptions import NotFittedError
            raise NotFittedError("BaselineExtractor must be fitted first")
        return np.stack([baseline_row(extract_rgb_baseline(A, self.m, stats)) for A in X])


# ---------------------------------------------------------------------------
# binary feature records (.rafb) and JSON sidecars
# ---------------------------------------------------------------------------

RAFB_MAGIC = b"RAFB"
RAFB_VERSION = 1
MODE_RAF, MODE_BASELINE = 0, 1
# magic, version, mode, channel count, resolution, absolute count
_RAFB_HEADER = struct.Struct("<4sHBBIB")


@dataclass(eq=False)
class FeatureRecord:
    """On-disk feature bundle: image planes plus optional absolute values."""

    mode: str
    channels: np.ndarray
    absolute: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def resolution(self) -> int:
        return int(self.channels.shape[-1])

    def row(self) -> np.ndarray:
        parts = [self.channels.ravel().astype(np.float64)]
        if self.absolute is not None:
            parts.append(np.asarray(self.absolute, dtype=np.float64))
        return np.concatenate(parts)

    @classmethod
    def from_raf(cls, feat: RafFeatures, meta=None) -> "FeatureRecord":
        return cls("raf", feat.channels.stack(), feat.absolute.as_array(), dict(meta or {}))

    @classmethod
    def from_baseline(cls, ch: ImageChannels, meta=None) -> "FeatureRecord":
        return cls("baseline", ch.stack(), None, dict(meta or {}))


def encode_record(rec: FeatureRecord) -> bytes:
    ch = np.ascontiguousarray(rec.channels, dtype=np.uint8)
    absolute = np.zeros(0) if rec.absolute is None else np.asarray(rec.absolute, "<f8")
    mode = MODE_RAF if rec.mode == "raf" else MODE_BASELINE
    head = _RAFB_HEADER.pack(RAFB_MAGIC, RAFB_VERSION, mode, ch.shape[0], ch.shape[-1],
                             absolute.size)
    return head + ch.tobytes() + absolute.astype("<f8").tobytes()


def decode_record(blob: bytes) -> FeatureRecord:
    if len(blob) < _RAFB_HEADER.size:
        raise FormatError("feature record truncated")
    magic, version, mode, planes, m, n_abs = _RAFB_HEADER.unpack_from(blob)
    if magic != RAFB_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != RAFB_VERSION:
        raise VersionError(f"feature record version {version}, expected {RAFB_VERSION}")
    n_img = planes * m * m
    expected = _RAFB_HEADER.size + n_img + 8 * n_abs
    if len(blob) != expected:
        raise FormatError(f"feature record has {len(blob)} bytes, expected {expected}")
    off = _RAFB_HEADER.size
    ch = np.frombuffer(blob, dtype=np.uint8, count=n_img, offset=off).reshape(planes, m, m)
    absolute = None
    if n_abs:
        absolute = np.frombuffer(blob, dtype="<f8", count=n_abs, offset=off + n_img).copy()
    return FeatureRecord("raf" if mode == MODE_RAF else "baseline", ch.copy(), absolute)


def save_record(path, rec: FeatureRecord) -> None:
    """Write ``<path>`` (binary) and ``<path>.json`` (human-readable sidecar)."""
    with open(path, "wb") as fh:
        fh.write(encode_record(rec))
    side = dict(rec.meta)
    side.update(mode=rec.mode, resolution=rec.resolution, channels=int(rec.channels.shape[0]))
    if rec.absolute is not None:
        side["absolute"] = dict(zip(ABSOLUTE_NAMES, map(float, rec.absolute)))
    with open(f"{path}.json", "w", encoding="utf-8") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_record(path) -> FeatureRecord:
    with open(path, "rb") as fh:
        return decode_record(fh.read())


def save_png(path, channels: np.ndarray) -> None:
    """Write a (C, m, m) byte stack as an RGB PNG; missing planes are zero."""
    from PIL import Image

    ch = np.asarray(channels, dtype=np.uint8)
    rgb = np.zeros((ch.shape[1], ch.shape[2], 3), dtype=np.uint8)
    # plane order is red, green, blue
    rgb[..., 0] = ch[0]
    rgb[..., 1] = ch[1]
    if ch.shape[0] > 2:
        rgb[..., 2] = ch[2]
    Image.fromarray(rgb).save(path)
