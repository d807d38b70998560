"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

Only the handful of operations the SortNet policy, the teacher Q-network and
the distillation losses need are provided. Every op builds a fresh node that
remembers its parents and a closure that pushes the output gradient back.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.dtype != np.float64:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad: np.ndarray | float | None = None) -> None:
        """Propagate ``grad`` (default 1 for scalars) to every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.broadcast_to(_as_array(grad), self.shape)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.array(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# element-wise and linear ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _node(data, (a, b), lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _node(data, (a, b), lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def backward(g):
        return ((a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape)))

    return _node(data, (a, b), backward, "mul")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: ((a, -g),), "neg")


def matmul(a, b) -> Tensor:
    """``a @ b`` for a of shape (..., n) or (n,) and b of shape (n, m)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim != 2 or a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.data.shape[-1])
        g2 = g.reshape(-1, b.data.shape[1])
        return ((a, ga), (b, a2.T @ g2))

    return _node(data, (a, b), backward, "matmul")


def affine(x, w, b) -> Tensor:
    """``w·x + b`` with w of shape (out, in); x may carry leading batch axes."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.data.ndim != 2 or x.data.shape[-1] != w.data.shape[1]:
        raise ShapeError(f"affine: input width {x.shape} does not match weight {w.shape}")
    if b.data.shape != (w.data.shape[0],):
        raise ShapeError(f"affine: bias {b.shape} does not match weight {w.shape}")
    data = x.data @ w.data.T + b.data

    def backward(g):
        x2 = x.data.reshape(-1, x.data.shape[-1])
        g2 = g.reshape(-1, w.data.shape[0])
        return ((x, g @ w.data), (w, g2.T @ x2), (b, g2.sum(axis=0)))

    return _node(data, (x, w, b), backward, "affine")


def abs_elem(x) -> Tensor:
    """Element-wise |x|; the subgradient at 0 is 0."""
    x = as_tensor(x)
    return _node(np.abs(x.data), (x,), lambda g: ((x, g * np.sign(x.data)),), "abs")


def relu(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.maximum(x.data, 0.0), (x,), lambda g: ((x, g * (x.data > 0.0)),), "relu")


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((x, np.broadcast_to(g, x.shape)),)

    return _node(np.asarray(data), (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _node(x.data * x.data, (x,), lambda g: ((x, 2.0 * x.data * g),), "square")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _node(x.data.reshape(shape), (x,), lambda g: ((x, g.reshape(x.shape)),), "reshape")


def pick(x, index) -> Tensor:
    """Select ``x[..., index[...]]`` along the last axis (one entry per row)."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"pick: index shape {idx.shape} does not match rows {x.shape[:-1]}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-1]):
        raise IndexError("pick: index out of range")
    data = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return ((x, gx),)

    return _node(data, (x,), backward, "pick")


# ---------------------------------------------------------------------------
# sorting and reductions
# ---------------------------------------------------------------------------

def argsort_desc(values: np.ndarray) -> np.ndarray:
    """Descending argsort along the last axis with ties kept in input order.

    A fast unstable sort is used first; rows that contain ties are redone
    with a stable sort, so the result always equals the stable ordering.
    """
    neg_vals = -values
    perm = np.argsort(neg_vals, axis=-1)
    if values.shape[-1] < 2:
        return perm
    ordered = np.take_along_axis(neg_vals, perm, axis=-1)
    tied = (ordered[..., 1:] == ordered[..., :-1]).any(axis=-1)
    if tied.any():
        perm[tied] = np.argsort(neg_vals[tied], axis=-1, kind="stable")
    return perm


def sort_desc(x) -> tuple[Tensor, np.ndarray]:
    """Sort the last axis in nonincreasing order.

    Returns the sorted tensor and ``perm`` with ``out[..., j] == x[..., perm[..., j]]``.
    The backward pass routes each output gradient to its source index.
    """
    x = as_tensor(x)
    if x.data.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError("sort_desc needs a nonempty vector")
    perm = argsort_desc(x.data)
    data = np.take_along_axis(x.data, perm, axis=-1)

    def backward(g):
        gx = np.empty_like(g)
        np.put_along_axis(gx, perm, g, axis=-1)
        return ((x, gx),)

    return _node(data, (x,), backward, "sort_desc"), perm


def log_sum_exp(z, axis: int = -1) -> Tensor:
    """Max-shifted log-sum-exp along ``axis``; its gradient is softmax(z)."""
    z = as_tensor(z)
    if z.data.ndim == 0 or z.shape[axis] == 0:
        raise ShapeError("log_sum_exp needs a nonempty vector")
    m = np.max(z.data, axis=axis, keepdims=True)
    e = np.exp(z.data - m)
    s = e.sum(axis=axis, keepdims=True)
    data = (m + np.log(s)).squeeze(axis)
    soft = e / s

    def backward(g):
        return ((z, np.expand_dims(g, axis) * soft),)

    return _node(data, (z,), backward, "log_sum_exp")


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def pnorm_last(x, p: float) -> Tensor:
    """``(sum_i x_i**p)**(1/p)`` along the last axis for nonnegative x.

    Evaluated as ``m * (sum (x/m)**p)**(1/p)`` with ``m = max x`` so large
    exponents do not overflow.
    """
    x = as_tensor(x)
    if p < 1:
        raise ValueError("pnorm_last needs p >= 1")
    if (x.data < 0).any():
        raise ValueError("pnorm_last needs nonnegative input")
    m = x.data.max(axis=-1, keepdims=True)
    safe = np.where(m > 0, m, 1.0)
    r = x.data / safe
    rp = r ** p
    s = rp.sum(axis=-1, keepdims=True)
    norm_r = s ** (1.0 / p)
    data = (m * norm_r)[..., 0]

    def backward(g):
        # d||x||_p/dx_i = (x_i / ||x||_p)^(p-1); zero when the whole row is zero
        ratio = np.where(m > 0, r / np.where(norm_r > 0, norm_r, 1.0), 0.0)
        return ((x, g[..., None] * ratio ** (p - 1.0)),)

    return _node(data, (x,), backward, "pnorm")


# ---------------------------------------------------------------------------
# fused SortNet contraction
# ---------------------------------------------------------------------------

# element budget above which the fused kernel recomputes sort orders during
# backward instead of caching the (batch, out, in) coefficient array
_CACHE_LIMIT = 1 << 25


def _sortnet_coeffs(x: np.ndarray, b: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pre = x[:, None, :] + b[None, :, :]
    perm = argsort_desc(np.abs(pre))
    coeff = np.empty_like(pre)
    np.put_along_axis(coeff, perm, np.broadcast_to(w, pre.shape), axis=-1)
    coeff *= np.sign(pre)
    out = np.einsum("bki,bki->bk", coeff, pre)
    return out, coeff


def sortnet_contract(x, b, w: np.ndarray, chunk: int | None = None) -> Tensor:
    """Fused ``out[n, k] = w · sort_desc(|x[n] + b[k]|)``.

    Equivalent to composing add, abs_elem, sort_desc and a contraction with
    the fixed weight vector ``w`` but without materialising the intermediate
    graph. x has shape (batch, in), b has shape (out, in).
    """
    x, b = as_tensor(x), as_tensor(b)
    w = np.asarray(w, dtype=np.float64)
    if x.data.ndim != 2 or b.data.ndim != 2 or x.shape[1] != b.shape[1] or w.shape != (b.shape[1],):
        raise ShapeError(f"sortnet_contract: x {x.shape}, b {b.shape}, w {w.shape}")
    n, d_out, d_in = x.shape[0], b.shape[0], b.shape[1]
    per_row = d_out * d_in
    if chunk is None:
        chunk = max(1, min(n, (1 << 22) // max(per_row, 1)))
    need_grad = x.requires_grad or b.requires_grad
    cache = need_grad and n * per_row <= _CACHE_LIMIT

    if not need_grad:
        out = np.empty((n, d_out))
        w_asc = np.ascontiguousarray(w[::-1])
        for lo in range(0, n, chunk):
            pre = x.data[lo:lo + chunk, None, :] + b.data[None, :, :]
            np.abs(pre, out=pre)
            pre.sort(axis=-1)
            out[lo:lo + chunk] = pre @ w_asc
        _check_finite(out, "sortnet")
        return Tensor(out)

    out = np.empty((n, d_out))
    coeffs = []
    for lo in range(0, n, chunk):
        o, c = _sortnet_coeffs(x.data[lo:lo + chunk], b.data, w)
        out[lo:lo + chunk] = o
        if cache:
            coeffs.append(c)

    def backward(g):
        gx = np.empty_like(x.data)
        gb = np.zeros_like(b.data)
        for i, lo in enumerate(range(0, n, chunk)):
            c = coeffs[i] if cache else _sortnet_coeffs(x.data[lo:lo + chunk], b.data, w)[1]
            gc = g[lo:lo + chunk]
            gx[lo:lo + chunk] = np.einsum("bk,bki->bi", gc, c)
            gb += np.einsum("bk,bki->ki", gc, c)
        return ((x, gx), (b, gb))

    return _node(out, (x, b), backward, "sortnet")
