from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .tensor import Tensor


class UsageError(RuntimeError):
    pass


class ParamStore:
    """Named trainable tensors, iterated in insertion order."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter id {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data) for k, t in self._params.items())

    def load_arrays(self, arrays) -> None:
        for k, arr in arrays.items():
            if k not in self._params:
                raise KeyError(f"unknown parameter {k!r}")
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != self._params[k].shape:
                raise ValueError(f"shape mismatch for {k!r}: {arr.shape} vs {self._params[k].shape}")
            self._params[k].data = arr.copy()

    def copy_from(self, other: "ParamStore") -> None:
        self.load_arrays(other.arrays())


@dataclass
class AdamWState:
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: ParamStore, state: AdamWState, allow_missing: bool = False) -> None:
    """One AdamW update with decoupled weight decay, then clear gradients.

    ``allow_missing`` treats a parameter without a gradient as having a zero
    gradient (e.g. a branch that did not fire on this batch).
    """
    for name, p in params.items():
        if p.grad is None and not allow_missing:
            raise UsageError(f"parameter {name!r} has no gradient")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        data = p.data * (1.0 - state.lr * state.weight_decay)
        data = data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data = data
        p.grad = None
