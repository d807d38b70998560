from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    out = np.empty_like(x)
    flat = x.reshape(-1)
    of = out.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f(x)
        flat[i] = keep - h
        fm = f(x)
        flat[i] = keep
        of[i] = (fp - fm) / (2.0 * h)
    return out


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central| / max(1, |central|).

    ``f`` maps a Tensor to a scalar Tensor built from differentiable ops.
    """
    x = np.array(x, dtype=np.float64)
    xt = Tensor(x.copy(), requires_grad=True)
    f(xt).backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x)
    central = numeric_grad(lambda a: f(Tensor(a)).item(), x, h)
    return float(np.max(np.abs(analytic - central) / np.maximum(1.0, np.abs(central))))
