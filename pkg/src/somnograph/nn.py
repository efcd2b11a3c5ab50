"""Layers with hand-written forward and backward passes, the softmax
cross-entropy loss, the Adam optimizer and the checkpoint container.

Activation layout inside a feature-extraction pipeline is ``(N, R, F, T)``:
batch, (virtual) channel rows, feature maps, time. Time is kept on the last
axis so the temporal convolutions can run as batched real FFTs.
"""

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import fft as sfft

from .numerics import gaussian_init, make_rng

__all__ = [
    "Layer",
    "SpatialFilter",
    "TemporalConv",
    "ReLU",
    "MaxPool",
    "Flatten",
    "Dropout",
    "Dense",
    "Sequential",
    "softmax",
    "softmax_cross_entropy",
    "cross_entropy_backward",
    "AdamState",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_FORMAT",
    "CHECKPOINT_VERSION",
]

INIT_STD = 0.1


class Layer:
    """Base class. Subclasses fill ``params`` and, after ``backward``,
    ``grads`` with arrays of matching shapes."""

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    @property
    def n_params(self):
        return sum(p.size for p in self.params.values())


class SpatialFilter(Layer):
    """Linear, bias-free mixing of C input channels into V virtual channels.

    Input (N, C, T), output (N, V, 1, T): the singleton axis is the feature-map
    axis the temporal convolutions expect.
    """

    def __init__(self, n_in, n_out=None, rng=None, dtype=np.float64):
        super().__init__()
        n_out = n_in if n_out is None else n_out
        self.params["weight"] = gaussian_init((n_out, n_in), 0.0, INIT_STD, rng, dtype)

    def forward(self, x, train=False):
        w = self.params["weight"]
        if x.ndim != 3 or x.shape[1] != w.shape[1]:
            raise ValueError(f"spatial filter expects (N, {w.shape[1]}, T) input, got {x.shape}")
        self._x = x
        return np.einsum("vc,nct->nvt", w, x)[:, :, None, :]

    def backward(self, grad):
        g = grad[:, :, 0, :]
        self.grads["weight"] = np.einsum("nvt,nct->vc", g, self._x)
        return np.einsum("vc,nvt->nct", self.params["weight"], g)


class TemporalConv(Layer):
    """1-D convolution along time, shared across channel rows, 'same' output
    length. For an even kernel length L the input is zero-padded with
    (L-1)//2 samples on the left and L//2 on the right.

    Input (N, R, F_in, T), output (N, R, F_out, T).
    """

    def __init__(self, n_in, n_out, length=64, rng=None, dtype=np.float64):
        super().__init__()
        self.length = length
        self.params["kernel"] = gaussian_init((n_out, n_in, length), 0.0, INIT_STD, rng, dtype)
        self.params["bias"] = np.zeros(n_out, dtype=dtype)

    def _fft_size(self, t):
        return sfft.next_fast_len(t + self.length - 1, real=True)

    def forward(self, x, train=False):
        k = self.params["kernel"]
        n_out, n_in, length = k.shape
        if x.ndim != 4 or x.shape[2] != n_in:
            raise ValueError(f"temporal conv expects (N, R, {n_in}, T) input, got {x.shape}")
        t = x.shape[-1]
        nfft = self._fft_size(t)
        left = (length - 1) // 2
        xp = np.zeros(x.shape[:-1] + (nfft,), dtype=x.dtype)
        xp[..., left : left + t] = x
        xf = sfft.rfft(xp, axis=-1)
        kf = sfft.rfft(k, nfft, axis=-1)
        # cross-correlation: y[t] = sum_j xp[t + j] k[j]
        yf = np.einsum("nrif,oif->nrof", xf, np.conj(kf), optimize=True)
        y = sfft.irfft(yf, nfft, axis=-1)[..., :t]
        self._cache = (xf, kf, t, nfft)
        return (y + self.params["bias"][:, None]).astype(x.dtype, copy=False)

    def backward(self, grad):
        xf, kf, t, nfft = self._cache
        left = (self.length - 1) // 2
        gf = sfft.rfft(grad, nfft, axis=-1)
        dk = sfft.irfft(np.einsum("nrif,nrof->oif", xf, np.conj(gf), optimize=True), nfft, axis=-1)
        self.grads["kernel"] = dk[..., : self.length].astype(self.params["kernel"].dtype, copy=False)
        self.grads["bias"] = grad.sum(axis=(0, 1, 3), dtype=np.float64).astype(self.params["bias"].dtype)
        dxp = sfft.irfft(np.einsum("nrof,oif->nrif", gf, kf, optimize=True), nfft, axis=-1)
        return dxp[..., left : left + t].astype(grad.dtype, copy=False)


class ReLU(Layer):
    def forward(self, x, train=False):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad):
        return np.where(self._mask, grad, 0).astype(grad.dtype, copy=False)


class MaxPool(Layer):
    """Non-overlapping max pooling over the last (time) axis.

    Ties go to the earliest index; a trailing remainder shorter than the pool
    size is dropped.
    """

    def __init__(self, size=16):
        super().__init__()
        self.size = size

    def forward(self, x, train=False):
        t = x.shape[-1]
        n_out = t // self.size
        if n_out == 0:
            raise ValueError(f"time length {t} shorter than pool size {self.size}")
        xr = x[..., : n_out * self.size].reshape(x.shape[:-1] + (n_out, self.size))
        idx = np.argmax(xr, axis=-1)
        self._shape = x.shape
        self._idx = idx
        return np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        n_out = grad.shape[-1]
        dxr = np.zeros(grad.shape + (self.size,), dtype=grad.dtype)
        np.put_along_axis(dxr, self._idx[..., None], grad[..., None], axis=-1)
        dx = np.zeros(self._shape, dtype=grad.dtype)
        dx[..., : n_out * self.size] = dxr.reshape(grad.shape[:-1] + (n_out * self.size,))
        return dx


class Flatten(Layer):
    """(N, R, F, T) -> (N, R*T*F), flattening in (row, time, feature) order."""

    def forward(self, x, train=False):
        self._shape = x.shape
        return np.ascontiguousarray(x.transpose(0, 1, 3, 2)).reshape(x.shape[0], -1)

    def backward(self, grad):
        n, r, f, t = self._shape
        return np.ascontiguousarray(grad.reshape(n, r, t, f).transpose(0, 1, 3, 2))


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1 - rate) at train time,
    inference is the identity."""

    def __init__(self, rate=0.5, rng=None):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.rng = make_rng(rng)

    def forward(self, x, train=False):
        if not train or self.rate == 0.0:
            self._scale = None
            return x
        keep = self.rng.random(x.shape) >= self.rate
        self._scale = (keep / (1.0 - self.rate)).astype(x.dtype)
        return x * self._scale

    def backward(self, grad):
        return grad if self._scale is None else grad * self._scale


class Dense(Layer):
    def __init__(self, n_in, n_out, rng=None, dtype=np.float64, bias=True):
        super().__init__()
        self.params["weight"] = gaussian_init((n_out, n_in), 0.0, INIT_STD, rng, dtype)
        if bias:
            self.params["bias"] = np.zeros(n_out, dtype=dtype)

    def forward(self, x, train=False):
        w = self.params["weight"]
        if x.shape[-1] != w.shape[1]:
            raise ValueError(f"dense layer expects {w.shape[1]} inputs, got {x.shape[-1]}")
        self._x = x
        y = x @ w.T
        if "bias" in self.params:
            y = y + self.params["bias"]
        return y

    def backward(self, grad):
        self.grads["weight"] = grad.T @ self._x
        if "bias" in self.params:
            self.grads["bias"] = grad.sum(axis=0)
        return grad @ self.params["weight"]


class Sequential(Layer):
    """Named chain of layers; parameters are exposed as ``"<layer>.<param>"``."""

    def __init__(self, layers):
        self.layers = list(layers)  # (name, layer) pairs

    @property
    def params(self):
        return {f"{name}.{k}": v for name, layer in self.layers for k, v in layer.params.items()}

    @property
    def grads(self):
        return {f"{name}.{k}": v for name, layer in self.layers for k, v in layer.grads.items()}

    def forward(self, x, train=False):
        for _, layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, grad):
        for _, layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def zero_grad(self):
        for _, layer in self.layers:
            layer.zero_grad()

    def layer(self, name):
        return dict(self.layers)[name]


def softmax(a):
    """Row-wise softmax with max subtraction, accumulated in float64."""
    a = np.asarray(a, dtype=np.float64)
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_targets(y, n_classes):
    y = np.asarray(y)
    if y.ndim >= 1 and y.shape[-1] == n_classes and np.issubdtype(y.dtype, np.floating):
        return y.astype(np.float64)
    out = np.zeros(y.shape + (n_classes,))
    np.put_along_axis(out, y.astype(np.int64)[..., None], 1.0, axis=-1)
    return out


def softmax_cross_entropy(a, y):
    """Probabilities and mean categorical cross-entropy.

    `a` holds logits of shape (5,) or (N, 5); `y` is one-hot of the same
    shape or integer labels.
    """
    a = np.asarray(a, dtype=np.float64)
    y = _as_targets(y, a.shape[-1])
    z = a - a.max(axis=-1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(log_p)
    per_example = -(y * log_p).sum(axis=-1)
    return p, float(np.mean(per_example))


def cross_entropy_backward(p, y):
    """Gradient of the mean loss with respect to the logits: (p - y) / N."""
    y = _as_targets(y, p.shape[-1])
    n = p.shape[0] if p.ndim == 2 else 1
    return (p - y) / n


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """In-place bias-corrected Adam update of every entry of `params` that
    has a gradient in `grads`."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} differs from parameter {name!r} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params


CHECKPOINT_FORMAT = "somnograph-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params, config=None):
    """Write parameters as JSON: name -> {shape, dtype, base64 little-endian data}."""
    entries = {}
    for name in sorted(params):
        arr = np.asarray(params[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        entries[name] = {
            "shape": list(arr.shape),
            "dtype": le.dtype.str,
            "data": base64.b64encode(np.ascontiguousarray(le).tobytes()).decode("ascii"),
        }
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config or {},
        "params": entries,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    params = {}
    for name, entry in doc["params"].items():
        buf = base64.b64decode(entry["data"])
        arr = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        params[name] = arr.astype(arr.dtype.newbyteorder("="))
    return params, doc["config"]
