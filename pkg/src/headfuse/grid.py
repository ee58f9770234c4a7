"""Dense C x H x W maps and the handful of layers the fusion heads need.

Everything here works in float64.  Values handed out in a :class:`GridMap`
are read-only views so a map can be shared between threads or strategies
without defensive copies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

__all__ = [
    "BNParams",
    "ConvParams",
    "GridMap",
    "attention_weights",
    "batchnorm_infer",
    "conv2d",
    "conv2d_array",
    "conv2d_array_backward",
    "relu",
    "scaled_dot_attention",
    "sigmoid",
]


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GridMap:
    """A C x H x W value grid plus an H x W validity mask.

    ``validity`` marks cells that carry sensor-derived data; cells produced
    by padding or out-of-range warping are ``False``.
    """

    values: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3 or min(values.shape) < 1:
            raise ShapeError(f"values must be a non-empty C x H x W array, got shape {values.shape}")
        validity = self.validity
        if validity is None:
            validity = np.ones(values.shape[1:], dtype=bool)
        validity = np.asarray(validity, dtype=bool)
        if validity.shape != values.shape[1:]:
            raise ShapeError(f"validity shape {validity.shape} does not match H x W {values.shape[1:]}")
        if not np.all(np.isfinite(values)):
            raise ShapeError("GridMap values must be finite")
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "validity", _frozen(validity, bool))

    @classmethod
    def full(cls, values):
        """Wrap ``values`` with an all-true validity mask."""
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.ones(values.shape[1:], dtype=bool))

    @classmethod
    def zeros(cls, channels, height, width, valid=True):
        validity = np.full((height, width), bool(valid))
        return cls(np.zeros((channels, height, width)), validity)

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def height(self):
        return self.values.shape[1]

    @property
    def width(self):
        return self.values.shape[2]

    @property
    def shape(self):
        return self.values.shape

    def with_values(self, values):
        return GridMap(values, self.validity)

    def equals(self, other):
        """Exact equality of values and validity."""
        return (
            self.shape == other.shape
            and bool(np.array_equal(self.values, other.values))
            and bool(np.array_equal(self.validity, other.validity))
        )


@dataclass(frozen=True, eq=False)
class ConvParams:
    """Weights (out, in, k, k) and bias (out,) of a same-padded convolution."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] not in (1, 3):
            raise ShapeError(f"weight must be (out, in, k, k) with k in {{1, 3}}, got {w.shape}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {b.shape} does not match out-channels {w.shape[0]}")
        object.__setattr__(self, "weight", _frozen(w))
        object.__setattr__(self, "bias", _frozen(b))

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def kernel_size(self):
        return self.weight.shape[2]

    @classmethod
    def init(cls, in_channels, out_channels, kernel_size, rng):
        """Uniform(+-1/sqrt(fan_in)) weights, zero bias."""
        bound = 1.0 / np.sqrt(in_channels * kernel_size * kernel_size)
        w = rng.uniform(-bound, bound, size=(out_channels, in_channels, kernel_size, kernel_size))
        return cls(w, np.zeros(out_channels))


@dataclass(frozen=True, eq=False)
class BNParams:
    """Inference-form batch normalization parameters."""

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        arrays = [np.asarray(getattr(self, k), dtype=np.float64) for k in ("gamma", "beta", "mean", "var")]
        n = arrays[0].shape
        if len(n) != 1 or any(a.shape != n for a in arrays):
            raise ShapeError("gamma, beta, mean and var must be 1-D arrays of equal length")
        if np.any(arrays[3] < 0):
            raise ShapeError("running variance must be non-negative")
        if not np.all(arrays[3] + self.eps > 0):
            raise ShapeError("var + eps must be positive")
        for key, a in zip(("gamma", "beta", "mean", "var"), arrays):
            object.__setattr__(self, key, _frozen(a))

    @property
    def channels(self):
        return self.gamma.shape[0]

    @classmethod
    def identity(cls, channels, eps=1e-5):
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels), eps)


# -- raw array kernels (shared with the autodiff tape) ----------------------


def conv2d_array(x, weight, bias):
    """Same-padded cross-correlation of a (C_in, H, W) array."""
    c_out, _, k, _ = weight.shape
    _, h, w = x.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.empty((c_out, h, w))
    out[:] = bias[:, None, None]
    for u in range(k):
        for v in range(k):
            out += np.einsum("oi,ihw->ohw", weight[:, :, u, v], xp[:, u : u + h, v : v + w])
    return out


def conv2d_array_backward(x, weight, grad_out):
    """Return (grad_x, grad_weight, grad_bias) for :func:`conv2d_array`."""
    _, _, k, _ = weight.shape
    _, h, w = x.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    grad_w = np.empty_like(weight)
    grad_xp = np.zeros_like(xp)
    for u in range(k):
        for v in range(k):
            window = xp[:, u : u + h, v : v + w]
            grad_w[:, :, u, v] = np.einsum("ohw,ihw->oi", grad_out, window)
            grad_xp[:, u : u + h, v : v + w] += np.einsum("oi,ohw->ihw", weight[:, :, u, v], grad_out)
    grad_x = grad_xp[:, pad : pad + h, pad : pad + w] if pad else grad_xp
    return grad_x, grad_w, grad_out.sum(axis=(1, 2))


def batchnorm_array(x, gamma, beta, mean, var, eps):
    scale = gamma / np.sqrt(var + eps)
    return (x - mean[:, None, None]) * scale[:, None, None] + beta[:, None, None]


def sigmoid_array(x):
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- GridMap-level operations ---------------------------------------------


def conv2d(grid, params):
    """Apply a same-padded convolution; validity passes through."""
    if grid.channels != params.in_channels:
        raise ShapeError(f"input has {grid.channels} channels, conv expects {params.in_channels}")
    return GridMap(conv2d_array(grid.values, params.weight, params.bias), grid.validity)


def batchnorm_infer(grid, params):
    """Per-channel ``(x - mean) / sqrt(var + eps) * gamma + beta``."""
    if grid.channels != params.channels:
        raise ShapeError(f"input has {grid.channels} channels, BN expects {params.channels}")
    out = batchnorm_array(grid.values, params.gamma, params.beta, params.mean, params.var, params.eps)
    return GridMap(out, grid.validity)


def relu(grid):
    return GridMap(np.maximum(grid.values, 0.0), grid.validity)


def sigmoid(grid):
    return GridMap(sigmoid_array(grid.values), grid.validity)


def attention_weights(x, d_k=None):
    """Row-stochastic softmax(X X^T / sqrt(d_k)) for X of shape (..., N, d)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2] < 1 or x.shape[-1] < 1:
        raise ShapeError(f"attention input must be (..., N, d) with N, d >= 1, got {x.shape}")
    if d_k is None:
        d_k = x.shape[-1]
    logits = np.matmul(x, np.swapaxes(x, -1, -2)) / np.sqrt(d_k)
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def scaled_dot_attention(x, d_k=None):
    """Self-attention with Q = K = V = X and no learned projections.

    ``x`` has shape (N, d) or a batch (..., N, d); ``d_k`` defaults to d.
    """
    x = np.asarray(x, dtype=np.float64)
    return np.matmul(attention_weights(x, d_k), x)
