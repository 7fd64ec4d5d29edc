"""Finite-difference verification of autodiff gradients."""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .nn import ParamStore
from .tensor import Tensor


def grad_check(f: Callable[[], Tensor], params: ParamStore | Iterable[Tensor], eps: float = 1e-4,
               max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` takes no arguments and closes over ``params``; it must be
    deterministic. Relative error uses max(|analytic|, |numeric|, 1e-8) as the
    denominator. With ``max_entries`` only that many randomly chosen entries
    per tensor are probed.
    """
    tensors = list(params.values()) if isinstance(params, ParamStore) else list(params)
    for t in tensors:
        t.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("grad_check: objective is not finite")
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    rng = rng or np.random.default_rng(0)

    worst = 0.0
    for t, ga in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError("grad_check: objective is not finite under perturbation")
            num = (up - down) / (2 * eps)
            an = ga.reshape(-1)[i]
            err = abs(an - num) / max(abs(an), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
