"""Differentiable primitives. Every op returns a Tensor and registers exact gradients."""
from __future__ import annotations

import numpy as np
from scipy import sparse

from .tensor import DimensionError, Tensor, as_tensor, get_default_dtype, make_result


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data

    def backward(g):
        return (g * p * ad ** (p - 1),)

    return make_result(ad ** p, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,))


# -- activations ---------------------------------------------------------------

def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return make_result(a.data * scale, (a,), lambda g: (g * scale,))


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    x = a.data
    neg = alpha * np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg)
    dout = np.where(x > 0, 1.0, neg + alpha).astype(x.dtype)
    return make_result(out, (a,), lambda g: (g * dout,))


# -- linear algebra -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise DimensionError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    k_a = ad.shape[-1]
    k_b = bd.shape[0] if bd.ndim == 1 else bd.shape[-2]
    if k_a != k_b:
        raise DimensionError(f"matmul: inner dimensions differ, shapes {a.shape} and {b.shape}")
    if ad.ndim > 2 and bd.ndim == 2:
        # (..., k) @ (k, m): one GEMM over flattened rows in both directions
        out = (ad.reshape(-1, k_a) @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def backward_flat(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = ad.reshape(-1, k_a).T @ g2 if b.requires_grad else None
            return ga, gb

        return make_result(out, (a, b), backward_flat)
    try:
        out = ad @ bd
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        A = ad[None, :] if ad.ndim == 1 else ad
        B = bd[:, None] if bd.ndim == 1 else bd
        G = g
        if ad.ndim == 1:
            G = np.expand_dims(G, -2)
        if bd.ndim == 1:
            G = np.expand_dims(G, -1)
        ga = gb = None
        if a.requires_grad:
            ga = G @ np.swapaxes(B, -1, -2)
            if ad.ndim == 1:
                ga = ga.reshape(-1, ad.shape[0]).sum(axis=0)
            else:
                ga = _unbroadcast(ga, ad.shape)
        if b.requires_grad:
            gb = np.swapaxes(A, -1, -2) @ G
            if bd.ndim == 1:
                gb = gb.reshape(-1, bd.shape[0]).sum(axis=0)
            else:
                gb = _unbroadcast(gb, bd.shape)
        return ga, gb

    return make_result(out, (a, b), backward)


# -- reductions and shape ops ---------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([shape[i] for i in axes]))
    if n == 0:
        raise DimensionError(f"mean: empty reduction over shape {shape}")

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return make_result(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def max(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = np.max(a.data, axis=axis, keepdims=True)
    mask = (a.data == out)
    mask = (mask / mask.sum(axis=axis, keepdims=True)).astype(a.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (g * mask,)

    res = out if keepdims else np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    return make_result(res, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return make_result(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return make_result(out, (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return make_result(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def expand_dims(a, axis: int) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make_result(np.expand_dims(a.data, axis), (a,), lambda g: (g.reshape(old),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    out = np.broadcast_to(a.data, shape)
    return make_result(out, (a,), lambda g: (_unbroadcast(g, old),))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: no inputs")
    ndim = tensors[0].ndim
    ax = axis % ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return make_result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if len({t.shape for t in tensors}) > 1:
        raise DimensionError(f"stack: shapes differ {[t.shape for t in tensors]}")
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return make_result(out, tuple(tensors), backward)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_result(out, (a,), backward)


def take_rows(a, index: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table; ``index`` may have any shape."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    n, d = a.shape
    out = a.data[index]

    def backward(g):
        flat = index.reshape(-1)
        gf = g.reshape(-1, d)
        # scatter-add as a sparse (n, m) @ (m, d) product; far faster than np.add.at
        scatter = sparse.csr_matrix((np.ones(len(flat), dtype=g.dtype), (flat, np.arange(len(flat)))),
                                    shape=(n, len(flat)))
        return (np.asarray(scatter @ gf),)

    return make_result(out, (a,), backward)


def segment_sum(a, segments: np.ndarray, n_segments: int) -> Tensor:
    """Sum rows of ``a`` (m, ...) into ``n_segments`` buckets given by ``segments`` (m,)."""
    a = as_tensor(a)
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape != (a.shape[0],):
        raise DimensionError(f"segment_sum: {segments.shape} segment ids for {a.shape[0]} rows")
    m = a.shape[0]
    rest = a.shape[1:]
    scatter = sparse.csr_matrix((np.ones(m, dtype=a.dtype), (segments, np.arange(m))), shape=(n_segments, m))
    out = np.asarray(scatter @ a.data.reshape(m, -1)).reshape((n_segments,) + rest)

    def backward(g):
        return (g[segments],)

    return make_result(out, (a,), backward)


def segment_softmax(a, segments: np.ndarray, n_segments: int) -> Tensor:
    """Softmax of rows of ``a`` (m, ...) within each segment; empty segments simply get no rows."""
    a = as_tensor(a)
    segments = np.asarray(segments, dtype=np.int64)
    shift = np.full((n_segments,) + a.shape[1:], -np.inf, dtype=a.dtype)
    np.maximum.at(shift, segments, a.data)
    ex = np.exp(a.data - shift[segments])
    denom = np.zeros((n_segments,) + a.shape[1:], dtype=a.dtype)
    np.add.at(denom, segments, ex)
    out = ex / denom[segments]

    def backward(g):
        dot = np.zeros((n_segments,) + a.shape[1:], dtype=a.dtype)
        np.add.at(dot, segments, g * out)
        return (out * (g - dot[segments]),)

    return make_result(out, (a,), backward)


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.where(cond, g, 0.0), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(cond, 0.0, g), b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward)


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return make_result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# -- normalization and softmax family ------------------------------------------

def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax. With a boolean ``mask`` (True = keep), masked
    entries get probability 0 and fully masked rows are all zeros."""
    a = as_tensor(a)
    x = a.data
    if mask is None:
        z = x - x.max(axis=axis, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=axis, keepdims=True)
    else:
        mask = np.broadcast_to(mask, x.shape)
        neg = np.finfo(x.dtype).min
        xm = np.where(mask, x, neg)
        m = xm.max(axis=axis, keepdims=True)
        m = np.where(np.isfinite(m) & (m > neg), m, 0.0)
        e = np.exp(np.where(mask, x - m, -np.inf)).astype(x.dtype)
        s = e.sum(axis=axis, keepdims=True)
        p = e / np.where(s > 0, s, 1.0)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_result(p.astype(x.dtype, copy=False), (a,), backward)


def log_softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(mask, x.shape)
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=axis, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    if mask is not None:
        out = np.where(mask, out, 0.0)

    def backward(g):
        if mask is not None:
            g = np.where(mask, g, 0.0)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_result(out.astype(a.dtype, copy=False), (a,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = xd.shape[-1]

    def backward(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = _unbroadcast(g * xhat, gamma.shape)
        if beta.requires_grad:
            gb = _unbroadcast(g, beta.shape)
        if x.requires_grad:
            gh = g * gamma.data
            gx = (inv / n) * (n * gh - gh.sum(axis=-1, keepdims=True)
                              - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), backward)


# -- losses ---------------------------------------------------------------------

def cross_entropy(logits, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean token NLL of integer ``targets`` under ``softmax(logits)`` on the last axis."""
    logits = as_tensor(logits)
    x = logits.data
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != x.shape[:-1]:
        raise DimensionError(f"cross_entropy: logits {x.shape} vs targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= x.shape[-1]):
        raise ValueError("cross_entropy: target id outside vocabulary")
    weight = np.ones(targets.shape, dtype=x.dtype) if mask is None else np.asarray(mask, dtype=x.dtype)
    count = weight.sum()
    if count == 0:
        raise ValueError("cross_entropy: no target tokens")
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    e = np.exp(z)
    s = e.sum(axis=-1, keepdims=True)
    logp = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0] - np.log(s[..., 0])
    loss = -(logp * weight).sum() / count

    def backward(g):
        p = e / s
        onehot_sub = np.zeros_like(p)
        np.put_along_axis(onehot_sub, targets[..., None], 1.0, axis=-1)
        return (g * (p - onehot_sub) * (weight / count)[..., None],)

    return make_result(np.asarray(loss, dtype=x.dtype), (logits,), backward)


def bce_with_logits(logits, labels: np.ndarray, clamp: float = 30.0) -> Tensor:
    """Elementwise binary cross-entropy of sigmoid(logits); inputs clamped to +-clamp."""
    z = clip(logits, -clamp, clamp)
    y = np.asarray(labels, dtype=get_default_dtype())
    zd = z.data
    # log(1 + exp(-|z|)) + max(z, 0) - z*y
    out = np.log1p(np.exp(-np.abs(zd))) + np.maximum(zd, 0.0) - zd * y
    p = _sigmoid(zd)
    return make_result(out.astype(zd.dtype, copy=False), (z,), lambda g: (g * (p - y),))
