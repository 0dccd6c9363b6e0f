"""A small dense-tensor network toolkit with hand-written backward passes.

Layers follow one protocol: ``forward(x, train=False)`` caches whatever the
backward pass needs and ``backward(dout)`` returns the input gradient while
filling ``grads`` (same keys and shapes as ``params``).  Tensors are plain
float64 numpy arrays, images in (batch, channels, height, width) layout.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np
from numba import njit

from .exceptions import ShapeError


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    params: dict
    grads: dict

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)


class Conv2D(Layer):
    """Stride-1 'same' cross-correlation with an odd square kernel."""

    def __init__(self, in_channels, out_channels, kernel=3, rng=None, input_grad=True):
        super().__init__()
        self.input_grad = input_grad
        if kernel % 2 != 1:
            raise ShapeError("kernel size must be odd for same padding")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.out_channels, self.kernel = in_channels, out_channels, kernel
        fan_in = in_channels * kernel * kernel
        self.params = {
            "W": he_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in),
            "b": np.zeros(out_channels),
        }
        self.zero_grad()

    def _columns(self, x):
        B, C, H, W = x.shape
        k, p = self.kernel, self.kernel // 2
        xp = np.zeros((B, H + 2 * p, W + 2 * p, C))
        xp[:, p:p + H, p:p + W, :] = x.transpose(0, 2, 3, 1)
        cols = np.empty((B, H, W, k * k, C))
        for i in range(k):
            for j in range(k):
                cols[:, :, :, i * k + j, :] = xp[:, i:i + H, j:j + W, :]
        return cols.reshape(B * H * W, k * k * C)

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"conv expects (B, {self.in_channels}, H, W), got {x.shape}")
        B, _, H, W = x.shape
        cols = self._columns(x)
        wcol = self.params["W"].transpose(2, 3, 1, 0).reshape(-1, self.out_channels)
        out = cols @ wcol + self.params["b"]
        self._cache = (x.shape, cols)
        return out.reshape(B, H, W, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, dout):
        (B, C, H, W), cols = self._cache
        k, p = self.kernel, self.kernel // 2
        d = dout.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        wcol = self.params["W"].transpose(2, 3, 1, 0).reshape(-1, self.out_channels)
        self.grads["W"] += (cols.T @ d).reshape(k, k, C, self.out_channels).transpose(3, 2, 0, 1)
        self.grads["b"] += d.sum(axis=0)
        if not self.input_grad:
            return None
        dcols = (d @ wcol.T).reshape(B, H, W, k * k, C)
        dxp = np.zeros((B, H + 2 * p, W + 2 * p, C))
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + H, j:j + W, :] += dcols[:, :, :, i * k + j, :]
        return dxp[:, p:p + H, p:p + W, :].transpose(0, 3, 1, 2)


@njit(cache=True)
def _pool_forward(x, out, arg):
    B, C, H, W = x.shape
    for b in range(B):
        for c in range(C):
            for i in range(H // 2):
                for j in range(W // 2):
                    best = x[b, c, 2 * i, 2 * j]
                    pos = 0
                    # scan order (0,0) (0,1) (1,0) (1,1); strict > keeps the first max
                    for t in range(1, 4):
                        v = x[b, c, 2 * i + t // 2, 2 * j + t % 2]
                        if v > best:
                            best = v
                            pos = t
                    out[b, c, i, j] = best
                    arg[b, c, i, j] = pos


@njit(cache=True)
def _pool_backward(dout, arg, dx):
    B, C, H2, W2 = dout.shape
    for b in range(B):
        for c in range(C):
            for i in range(H2):
                for j in range(W2):
                    t = arg[b, c, i, j]
                    dx[b, c, 2 * i + t // 2, 2 * j + t % 2] = dout[b, c, i, j]


class MaxPool2x2(Layer):
    """2x2 max pooling, stride 2; ties route the gradient to the first max."""

    def forward(self, x, train=False):
        B, C, H, W = x.shape
        if H % 2 or W % 2:
            raise ShapeError(f"max pooling needs even spatial dims, got {H}x{W}")
        out = np.empty((B, C, H // 2, W // 2))
        arg = np.empty((B, C, H // 2, W // 2), dtype=np.int8)
        _pool_forward(x, out, arg)
        self._cache = (x.shape, arg)
        return out

    def backward(self, dout):
        shape, arg = self._cache
        dx = np.zeros(shape)
        _pool_backward(np.ascontiguousarray(dout), arg, dx)
        return dx


class Linear(Layer):
    """y = x W^T + b with W of shape (out, in)."""

    def __init__(self, in_features, out_features, rng=None, zero=False):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        W = (np.zeros((out_features, in_features)) if zero or in_features == 0
             else he_uniform(rng, (out_features, in_features), in_features))
        self.params = {"W": W, "b": np.zeros(out_features)}
        self.zero_grad()

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"linear expects (B, {self.in_features}), got {x.shape}")
        self._x = x
        return x @ self.params["W"].T + self.params["b"]

    def backward(self, dout):
        self.grads["W"] += dout.T @ self._x
        self.grads["b"] += dout.sum(axis=0)
        return dout @ self.params["W"]


class ReLU(Layer):
    def forward(self, x, train=False):
        self._mask = x > 0
        return np.maximum(x, 0.0)

    def backward(self, dout):
        return dout * self._mask


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1-p) during training.

    The mask is drawn from ``self.rng``; give it a seeded generator to make
    training reproducible.
    """

    def __init__(self, p=0.5, rng=None):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.p = p
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def forward(self, x, train=False):
        if not train or self.p == 0.0:
            self._mask = None
            return x
        self._mask = (self.rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return x * self._mask

    def backward(self, dout):
        return dout if self._mask is None else dout * self._mask


class Flatten(Layer):
    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Sequential(Layer):
    def __init__(self, layers: Iterable[Layer]):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def named_params(self, prefix=""):
        for i, layer in enumerate(self.layers):
            for k in layer.params:
                yield f"{prefix}{i}.{k}", layer, k


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy of integer ``labels``; returns (loss, dlogits)."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    d = softmax(logits)
    d[np.arange(n), labels] -= 1.0
    return loss, d / n


class Adam:
    """Adam with bias correction; ``eps`` is added outside the square root."""

    def __init__(self, params: list, lr=8e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads: list):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def rel_error(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(loss_fn: Callable[[], float], arrays: list, analytic: list, *,
               tolerance=1e-5, samples: Optional[int] = 50, h=1e-5, seed=0,
               floor=1e-8) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn`` recomputes the scalar loss from the current contents of
    ``arrays`` (perturbed in place); ``analytic`` holds the matching
    gradients.  ``samples`` entries per array are checked (all if None).
    """
    rng = np.random.default_rng(seed)
    worst, count = 0.0, 0
    for arr, grad in zip(arrays, analytic):
        flat = arr.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        idx = np.arange(flat.size)
        if samples is not None and flat.size > samples:
            idx = rng.choice(flat.size, size=samples, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up = loss_fn()
            flat[i] = old - h
            down = loss_fn()
            flat[i] = old
            num = (up - down) / (2 * h)
            worst = max(worst, float(rel_error(num, gflat[i], floor)))
            count += 1
    return GradCheckReport(worst, count, tolerance)


def check_layer(layer: Layer, x: np.ndarray, *, tolerance=1e-5, samples=50, seed=0,
                train=False, reseed: Optional[Callable[[], None]] = None) -> GradCheckReport:
    """Gradient check of one layer under the loss ``sum(out * R)`` for random R.

    Covers both the parameter gradients and the input gradient.
    ``reseed`` runs before every forward pass (used to freeze dropout masks).
    """
    x = np.array(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if reseed:
        reseed()
    out = layer.forward(x, train)
    weight = rng.standard_normal(out.shape)

    def loss():
        if reseed:
            reseed()
        return float(np.sum(layer.forward(x, train) * weight))

    if reseed:
        reseed()
    layer.forward(x, train)
    layer.zero_grad()
    dx = layer.backward(weight)
    arrays = [x] + [layer.params[k] for k in layer.params]
    grads = [dx] + [layer.grads[k].copy() for k in layer.params]
    return grad_check(loss, arrays, grads, tolerance=tolerance, samples=samples, seed=seed)
