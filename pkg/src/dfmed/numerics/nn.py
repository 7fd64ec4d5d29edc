"""Parameter containers and the neural building blocks shared by both models."""
from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import functional as F
from .tensor import DimensionError, Tensor, get_default_dtype


class ParamStore:
    """Ordered name -> Tensor map of trainable parameters."""

    def __init__(self, rng: np.random.Generator | None = None):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def xavier(self, name: str, fan_in: int, fan_out: int, shape=None) -> Tensor:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        shape = shape or (fan_in, fan_out)
        return self.add(name, self.rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Tensor:
        return self.add(name, np.ones(shape))

    def normal(self, name: str, shape, std: float = 0.02) -> Tensor:
        return self.add(name, self.rng.normal(0.0, std, size=shape))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def n_params(self) -> int:
        return int(sum(p.data.size for p in self._params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in self._params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.data.shape:
                raise DimensionError(f"parameter {k}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.astype(get_default_dtype())

    def cast(self, dtype) -> None:
        for p in self._params.values():
            p.data = p.data.astype(dtype)


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, bias: bool = True):
        self.d_in, self.d_out = d_in, d_out
        self.W = store.xavier(f"{name}.W", d_in, d_out)
        self.b = store.zeros(f"{name}.b", (d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"linear: input {x.shape} vs weight {self.W.shape}")
        y = x @ self.W
        return y + self.b if self.b is not None else y


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, d: int):
        self.gamma = store.ones(f"{name}.gamma", (d,))
        self.beta = store.zeros(f"{name}.beta", (d,))

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta)


class FeedForward:
    """Two linear maps with a ReLU between; hidden width 4x the model width."""

    def __init__(self, store: ParamStore, name: str, d: int, hidden: int | None = None):
        self.d = d
        self.lin1 = Linear(store, f"{name}.lin1", d, hidden or 4 * d)
        self.lin2 = Linear(store, f"{name}.lin2", hidden or 4 * d, d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(F.relu(self.lin1(x)))


class GRUCell:
    """Standard GRU: update gate z, reset gate r, tanh candidate, convex update.

    h' = (1 - z) * h + z * tanh(W_h x + U_h (r * h) + b_h)
    """

    def __init__(self, store: ParamStore, name: str, d_in: int, d_hidden: int):
        self.d_in, self.d_hidden = d_in, d_hidden
        self.W = store.xavier(f"{name}.W", d_in, 3 * d_hidden)
        self.U_zr = store.xavier(f"{name}.U_zr", d_hidden, 2 * d_hidden)
        self.U_h = store.xavier(f"{name}.U_h", d_hidden, d_hidden)
        self.b = store.zeros(f"{name}.b", (3 * d_hidden,))

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in or h.shape[-1] != self.d_hidden:
            raise DimensionError(
                f"gru_cell: x {x.shape} / h {h.shape} vs dims ({self.d_in}, {self.d_hidden})")
        d = self.d_hidden
        gx = x @ self.W + self.b
        gh = h @ self.U_zr
        z = F.sigmoid(gx[..., :d] + gh[..., :d])
        r = F.sigmoid(gx[..., d:2 * d] + gh[..., d:])
        cand = F.tanh(gx[..., 2 * d:] + (r * h) @ self.U_h)
        return h + z * (cand - h)


def scaled_dot_attention(Q: Tensor, K: Tensor, V: Tensor, mask: np.ndarray | None = None,
                         n_heads: int = 1) -> Tensor:
    """softmax(Q K^T / sqrt(d_head)) V over the key axis.

    Q: (..., nq, d), K: (..., nk, d), V: (..., nk, dv). ``mask`` broadcasts to
    (..., nq, nk) with True marking usable keys. Queries with no usable key, and
    an empty key set, produce zero vectors.
    """
    d = Q.shape[-1]
    if K.shape[-1] != d:
        raise DimensionError(f"attention: query dim {Q.shape} vs key dim {K.shape}")
    if K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"attention: {K.shape[-2]} keys vs {V.shape[-2]} values")
    nk = K.shape[-2]
    dv = V.shape[-1]
    if nk == 0:
        lead = np.broadcast_shapes(Q.shape[:-2], K.shape[:-2])
        return Tensor(np.zeros(lead + (Q.shape[-2], dv)))
    if d % n_heads or dv % n_heads:
        raise DimensionError(f"attention: dims {d}/{dv} not divisible by {n_heads} heads")
    if n_heads == 1:
        scores = (Q @ F.swapaxes(K, -1, -2)) * (1.0 / math.sqrt(d))
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
        alpha = F.softmax(scores, axis=-1, mask=mask)
        return alpha @ V
    dh, dvh = d // n_heads, dv // n_heads
    q = F.swapaxes(Q.reshape(Q.shape[:-1] + (n_heads, dh)), -2, -3)
    k = F.swapaxes(K.reshape(K.shape[:-1] + (n_heads, dh)), -2, -3)
    v = F.swapaxes(V.reshape(V.shape[:-1] + (n_heads, dvh)), -2, -3)
    scores = (q @ F.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    if mask is not None:
        mask = np.expand_dims(np.asarray(mask, dtype=bool), -3)
    alpha = F.softmax(scores, axis=-1, mask=mask)
    out = F.swapaxes(alpha @ v, -2, -3)
    return out.reshape(out.shape[:-2] + (dv,))


class CrossAttention:
    """Single- or multi-head attention with learned Q/K/V (and optional output) projections."""

    def __init__(self, store: ParamStore, name: str, d: int, n_heads: int = 1, out_proj: bool = False):
        self.n_heads = n_heads
        self.q = Linear(store, f"{name}.q", d, d, bias=False)
        self.k = Linear(store, f"{name}.k", d, d, bias=False)
        self.v = Linear(store, f"{name}.v", d, d, bias=False)
        self.o = Linear(store, f"{name}.o", d, d) if out_proj else None

    def __call__(self, query: Tensor, keys: Tensor, mask: np.ndarray | None = None) -> Tensor:
        out = scaled_dot_attention(self.q(query), self.k(keys), self.v(keys), mask, self.n_heads)
        if self.o is not None:
            out = self.o(out)
        return out


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe.astype(get_default_dtype())


class TransformerLayer:
    """Pre-norm self-attention block followed by a pre-norm feed-forward block."""

    def __init__(self, store: ParamStore, name: str, d: int, n_heads: int):
        self.ln1 = LayerNorm(store, f"{name}.ln1", d)
        self.attn = CrossAttention(store, f"{name}.attn", d, n_heads, out_proj=True)
        self.ln2 = LayerNorm(store, f"{name}.ln2", d)
        self.ffn = FeedForward(store, f"{name}.ffn", d)

    def __call__(self, x: Tensor, mask: np.ndarray | None) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, mask)
        return x + self.ffn(self.ln2(x))
