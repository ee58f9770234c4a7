"""A small reverse-mode tape over the layers in :mod:`headfuse.grid`.

Only what the complementary fusion network and its loss need is here:
conv, inference batch norm, relu/sigmoid, elementwise arithmetic with
broadcasting, concatenation, masked min-max normalization, masked select
and smooth-L1.  Every op records its parents and a closure mapping the
output gradient to parent gradients; :func:`backward` walks the graph in
reverse topological order.
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import ShapeError, UsageError
from .grid import batchnorm_array, conv2d_array, conv2d_array_backward, sigmoid_array

__all__ = [
    "Tensor",
    "add",
    "backward",
    "batchnorm",
    "concat",
    "constant",
    "conv2d",
    "leaf",
    "minmax_normalize",
    "mul",
    "relu",
    "sigmoid",
    "smooth_l1",
    "sub",
    "total",
    "where",
]


class Tensor:
    __slots__ = ("backward_fn", "grad", "name", "parents", "requires_grad", "value")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else constant(x)


def leaf(value, name=None):
    """A trainable input; :func:`backward` stores its gradient in ``.grad``."""
    return Tensor(value, requires_grad=True, name=name)


def constant(value):
    return Tensor(value)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss):
    """Back-propagate from scalar ``loss``; return {tensor: gradient} for leaves.

    Raises :class:`UsageError` if ``loss`` was not produced by recorded ops.
    """
    if not isinstance(loss, Tensor) or (not loss.parents and not loss.requires_grad):
        raise UsageError("backward() needs a loss produced by recorded operations")
    if loss.value.size != 1:
        raise UsageError(f"loss must be a scalar, got shape {loss.value.shape}")
    if not np.isfinite(loss.value).all():
        raise UsageError("loss is not finite")

    order, seen, stack = [], set(), [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        stack.extend((p, False) for p in node.parents if p.requires_grad and id(p) not in seen)

    grads = {id(loss): np.ones_like(loss.value)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g
            leaves[node] = g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return leaves


# -- ops -------------------------------------------------------------------


def conv2d(x, weight, bias):
    if x.shape[0] != weight.shape[1]:
        raise ShapeError(f"input has {x.shape[0]} channels, conv expects {weight.shape[1]}")
    out = conv2d_array(x.value, weight.value, bias.value)

    def back(g):
        gx, gw, gb = conv2d_array_backward(x.value, weight.value, g)
        return gx, gw, gb

    return Tensor(out, (x, weight, bias), back)


def batchnorm(x, gamma, beta, mean, var, eps):
    if not (x.shape[0] == gamma.shape[0] == beta.shape[0] == mean.shape[0] == var.shape[0]):
        raise ShapeError("batch norm channel count mismatch")
    out = batchnorm_array(x.value, gamma.value, beta.value, mean.value, var.value, eps)

    def back(g):
        denom = var.value + eps
        inv = 1.0 / np.sqrt(denom)
        centered = x.value - mean.value[:, None, None]
        g_gamma = (g * centered).sum(axis=(1, 2)) * inv
        g_beta = g.sum(axis=(1, 2))
        g_x = g * (gamma.value * inv)[:, None, None]
        g_mean = -g_x.sum(axis=(1, 2))
        g_var = (g * centered).sum(axis=(1, 2)) * gamma.value * -0.5 * denom**-1.5
        return g_x, g_gamma, g_beta, g_mean, g_var

    return Tensor(out, (x, gamma, beta, mean, var), back)


def relu(x):
    pos = x.value > 0
    return Tensor(np.where(pos, x.value, 0.0), (x,), lambda g: (g * pos,))


def sigmoid(x):
    s = sigmoid_array(x.value)
    return Tensor(s, (x,), lambda g: (g * s * (1.0 - s),))


def add(a, b):
    out = a.value + b.value
    return Tensor(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    out = a.value - b.value
    return Tensor(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    out = a.value * b.value
    return Tensor(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def concat(tensors, axis=0):
    tensors = list(tensors)
    out = np.concatenate([t.value for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        return tuple(np.take(g, range(lo, hi), axis=axis) for lo, hi in itertools.pairwise(bounds))

    return Tensor(out, tensors, back)


def where(mask, a, b):
    """``a`` where ``mask`` (broadcast over channels) else ``b``."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.value, b.value)
    return Tensor(
        out,
        (a, b),
        lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape), _unbroadcast(np.where(mask, 0.0, g), b.shape)),
    )


def minmax_normalize(x, mask):
    """Min-max rescale ``x`` to [0, 1] over ``mask`` cells; 0 elsewhere.

    When the masked values are all equal (or the mask is empty) the masked
    cells get 0.5 and no gradient flows.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.zeros_like(x.value)
    if not mask.any():
        return Tensor(out, (x,), lambda g: (np.zeros_like(g),))
    flat = np.where(mask, x.value, np.nan).ravel()
    i_lo, i_hi = int(np.nanargmin(flat)), int(np.nanargmax(flat))
    lo, hi = flat[i_lo], flat[i_hi]
    span = hi - lo
    if span <= 0:
        out[mask] = 0.5
        return Tensor(out, (x,), lambda g: (np.zeros_like(g),))
    out[mask] = (x.value[mask] - lo) / span

    def back(g):
        gm = np.where(mask, g, 0.0)
        gx = gm / span
        xv = x.value
        g_lo = np.sum(gm * (xv - hi)) / span**2
        g_hi = -np.sum(gm * (xv - lo)) / span**2
        gx = gx.ravel().copy()
        gx[i_lo] += g_lo
        gx[i_hi] += g_hi
        return (gx.reshape(xv.shape),)

    return Tensor(out, (x,), back)


def smooth_l1(pred, target, mask, beta=1.0):
    """Mean smooth-L1 over ``mask`` entries (0 if the mask is empty)."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), pred.shape)
    n = int(mask.sum())
    target = np.asarray(target, dtype=np.float64)
    d = np.where(mask, pred.value - target, 0.0)
    ad = np.abs(d)
    per = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    value = per.sum() / n if n else 0.0

    def back(g):
        if not n:
            return (np.zeros_like(pred.value),)
        return (g * np.where(ad < beta, d / beta, np.sign(d)) / n,)

    return Tensor(np.asarray(value), (pred,), back)


def total(x):
    return Tensor(np.asarray(x.value.sum()), (x,), lambda g: (np.full_like(x.value, float(g)),))
