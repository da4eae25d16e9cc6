"""Differentiable operations on :class:`~hireformer.numerics.tensor.Tensor`.

Every function here takes tensors (or array-likes for constants) and returns
a tensor whose backward rule is recorded on the active tape.
"""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, record, unbroadcast

__all__ = [
    "add", "sub", "mul", "div", "neg", "power", "matmul", "sum", "mean",
    "reshape", "transpose", "swapaxes", "getitem", "gather", "concat", "stack",
    "exp", "log", "tanh", "sqrt", "abs", "sigmoid", "gelu", "clip",
    "softmax", "log_softmax", "logsumexp", "layer_norm", "embedding_lookup",
    "cross_entropy", "binary_cross_entropy", "masked_fill", "where", "dropout",
    "roll", "expand_dims",
]


def _t(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return as_tensor(x, dtype=dtype)


def _binary_operands(a, b):
    if isinstance(a, Tensor):
        return a, _t(b, a)
    b = _t(b)
    return _t(a, b), b


# --- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return record(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b),
                  lambda g: (unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                             unbroadcast(g * ad, bd.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bwd(g):
        ga = unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = _t(a)
    return record(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = _t(a)
    ad = a.data
    return record(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


# --- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return record(ad @ bd, (a, b), bwd)


# --- reductions and shape ----------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _t(a)
    shape = a.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return record(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _t(a)
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def expand_dims(a, axis) -> Tensor:
    a = _t(a)
    old = a.shape
    return record(np.expand_dims(a.data, axis), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = _t(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _t(a)
    return record(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def getitem(a, idx) -> Tensor:
    a = _t(a)
    shape, dtype = a.shape, a.dtype

    def bwd(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return record(a.data[idx], (a,), bwd)


def gather(a, index: np.ndarray, axis: int, unique: bool = False) -> Tensor:
    """``np.take_along_axis`` with a scatter-add backward.

    ``unique=True`` promises no index repeats along ``axis`` (e.g. a
    permutation), which allows a plain scatter instead of ``np.add.at``.
    """
    a = _t(a)
    index = np.asarray(index)
    shape, dtype = a.shape, a.dtype
    axis = axis % a.ndim

    def bwd(g):
        out = np.zeros(shape, dtype=dtype)
        if unique:
            np.put_along_axis(out, index, g, axis=axis)
        else:
            full_idx = list(np.indices(index.shape, sparse=True))
            full_idx[axis] = index
            np.add.at(out, tuple(full_idx), g)
        return (out,)

    return record(np.take_along_axis(a.data, index, axis=axis), (a,), bwd)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_t(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return record(np.concatenate([t.data for t in ts], axis=axis), ts,
                  lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_t(t) for t in tensors]
    n = len(ts)

    def bwd(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return record(np.stack([t.data for t in ts], axis=axis), ts, bwd)


def roll(a, shift: int, axis: int) -> Tensor:
    a = _t(a)
    return record(np.roll(a.data, shift, axis=axis), (a,), lambda g: (np.roll(g, -shift, axis=axis),))


# --- pointwise nonlinearities ------------------------------------------------

def exp(a) -> Tensor:
    a = _t(a)
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _t(a)
    ad = a.data
    return record(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a) -> Tensor:
    a = _t(a)
    out = np.tanh(a.data)
    return record(out, (a,), lambda g: (g * (1 - out * out),))


def sqrt(a) -> Tensor:
    a = _t(a)
    out = np.sqrt(a.data)
    return record(out, (a,), lambda g: (g * 0.5 / out,))


def abs(a) -> Tensor:  # noqa: A001
    a = _t(a)
    ad = a.data
    return record(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def sigmoid(a) -> Tensor:
    a = _t(a)
    ad = a.data
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    e = np.exp(ad[~pos])
    out[~pos] = e / (1.0 + e)
    return record(out, (a,), lambda g: (g * out * (1 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = _t(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1 + t)

    def bwd(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

    return record(out, (a,), bwd)


def clip(a, lo: float, hi: float) -> Tensor:
    a = _t(a)
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return record(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


# --- softmax family ------------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = _t(a)
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (a,), bwd)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _t(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record(out, (a,), bwd)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = _t(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    p = np.exp(x - lse)
    out = lse if keepdims else np.squeeze(lse, axis=axis)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * p,)

    return record(out, (a,), bwd)


# --- normalization and lookup ---------------------------------------------------

def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = _t(x), _t(gain), _t(bias)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data
    out = xhat * gd + bias.data
    d = xd.shape[-1]

    def bwd(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        ggain = unbroadcast(g * xhat, gd.shape) if gain.requires_grad else None
        gbias = unbroadcast(g, bias.shape) if bias.requires_grad else None
        return gx, ggain, gbias

    assert gd.shape == (d,)
    return record(out, (x, gain, bias), bwd)


def embedding_lookup(table, ids) -> Tensor:
    """Gather rows of ``table``; ``ids`` may have any shape."""
    table = _t(table)
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = ids[(ids < 0) | (ids >= vocab)].reshape(-1)[0]
        raise IndexError(f"embedding id {int(bad)} out of range [0, {vocab})")
    shape, dtype = table.shape, table.dtype

    def bwd(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return record(table.data[ids], (table,), bwd)


# --- losses -----------------------------------------------------------------------

def cross_entropy(logits, targets, reduction: str = "mean", weights=None) -> Tensor:
    """Softmax cross-entropy of ``logits[..., V]`` against integer ``targets``.

    ``weights`` (same shape as ``targets``) scales each row's loss before the
    reduction; a zero weight removes that row (used for padding).
    ``reduction`` is ``"mean"`` (over rows), ``"sum"`` or ``"none"``.
    """
    logits = _t(logits)
    targets = np.asarray(targets, dtype=np.int64)
    x = logits.data
    vocab = x.shape[-1]
    if targets.shape != x.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {x.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        bad = targets[(targets < 0) | (targets >= vocab)].reshape(-1)[0]
        raise IndexError(f"target id {int(bad)} out of range [0, {vocab})")
    w = None if weights is None else np.asarray(weights, dtype=x.dtype)
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, targets[..., None], axis=-1)[..., 0]
    per_row = lse - picked
    if w is not None:
        per_row = per_row * w
    if reduction == "none":
        out, scale = per_row, None
    elif reduction == "sum":
        out, scale = np.asarray(per_row.sum()), 1.0
    elif reduction == "mean":
        n = max(per_row.size, 1)
        out, scale = np.asarray(per_row.sum() / n), 1.0 / n
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def bwd(g):
        p = np.exp(shifted - lse[..., None])
        np.put_along_axis(p, targets[..., None],
                          np.take_along_axis(p, targets[..., None], axis=-1) - 1, axis=-1)
        row = g if scale is None else np.broadcast_to(g * scale, per_row.shape)
        if w is not None:
            row = row * w
        return (p * row[..., None],)

    return record(out.astype(x.dtype, copy=False), (logits,), bwd)


BCE_EPS = 1e-7


def binary_cross_entropy(p, y, eps: float = BCE_EPS) -> Tensor:
    """``-(y log p + (1-y) log(1-p))`` with ``p`` clamped to ``[eps, 1-eps]``."""
    p = clip(_t(p), eps, 1.0 - eps)
    y = np.asarray(y, dtype=p.dtype)
    return neg(add(mul(log(p), y), mul(log(sub(1.0, p)), 1.0 - y)))


# --- masking and regularization -------------------------------------------------

def masked_fill(a, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true with the constant ``value``."""
    a = _t(a)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)
    shape = a.shape
    return record(out, (a,), lambda g: (unbroadcast(np.where(mask, 0, g), shape),))


def where(cond, a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return record(np.where(cond, a.data, b.data), (a, b),
                  lambda g: (unbroadcast(np.where(cond, g, 0), sa),
                             unbroadcast(np.where(cond, 0, g), sb)))


def dropout(a, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when ``rate == 0`` or ``rng`` is None."""
    a = _t(a)
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return mul(a, keep)


# --- operator overloads -----------------------------------------------------------

def _install_operators():
    T = Tensor
    T.__add__ = lambda s, o: add(s, o)
    T.__radd__ = lambda s, o: add(o, s)
    T.__sub__ = lambda s, o: sub(s, o)
    T.__rsub__ = lambda s, o: sub(o, s)
    T.__mul__ = lambda s, o: mul(s, o)
    T.__rmul__ = lambda s, o: mul(o, s)
    T.__truediv__ = lambda s, o: div(s, o)
    T.__rtruediv__ = lambda s, o: div(o, s)
    T.__neg__ = lambda s: neg(s)
    T.__pow__ = lambda s, p: power(s, p)
    T.__matmul__ = lambda s, o: matmul(s, o)
    T.__rmatmul__ = lambda s, o: matmul(o, s)
    T.__getitem__ = lambda s, idx: getitem(s, idx)
    T.sum = lambda s, axis=None, keepdims=False: sum(s, axis, keepdims)
    T.mean = lambda s, axis=None, keepdims=False: mean(s, axis, keepdims)
    T.reshape = lambda s, *shape: reshape(s, shape[0] if len(shape) == 1 else shape)
    T.transpose = lambda s, *axes: transpose(s, axes if axes else None)
    T.exp = lambda s: exp(s)
    T.log = lambda s: log(s)
    T.T = property(lambda s: transpose(s))


_install_operators()
