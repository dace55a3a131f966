"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op works on the trailing axes, so the same code path serves a single
token sequence ``[n, d]`` and a batch ``[B, n, d]``.  Values live in numpy
arrays; the tape is implicit in the parent links and an increasing node id,
which gives a valid topological order for free.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "div",
    "power",
    "exp",
    "log",
    "tanh",
    "sum",
    "mean",
    "reshape",
    "swapaxes",
    "broadcast_to",
    "matmul",
    "softmax_lastdim",
    "log_softmax_lastdim",
    "layer_norm",
    "linear",
    "concat_rows",
    "slice_rows",
    "gather_rows",
    "dropout",
    "gelu",
]

_node_ids = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation, finite differences)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_node_ids)
        self.op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out._id = next(_node_ids)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)


def tensor(values, requires_grad: bool = False) -> Tensor:
    """Build a leaf tensor; non-finite values are rejected."""
    return Tensor(values, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("root does not depend on any tensor that requires grad")

    nodes: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in nodes:
            continue
        nodes[node._id] = node
        stack.extend(p for p in node._parents if p.requires_grad and p._id not in nodes)

    grads: dict[int, np.ndarray] = {root._id: np.ones_like(root.data)}
    for node_id in sorted(nodes, reverse=True):
        node = nodes[node_id]
        g = grads.pop(node_id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent._id)
            grads[parent._id] = pg if prev is None else prev + pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        c = float(b)
        return Tensor._result(a.data * c, (a,), lambda g: (g * c,), "scale")
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return Tensor._result(out, (a, b), bw, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return Tensor._result(a.data**exponent, (a,), bw, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return Tensor._result(out, (a,), bw, "gelu")


# ---------------------------------------------------------------- reductions / shape


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return Tensor._result(
        np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes"
    )


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Expand ``a`` to ``shape`` (e.g. a shared CLS token to a whole batch)."""
    return Tensor._result(
        np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast"
    )


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batching the leading ones."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._result(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    if x.ndim == 1:
        out = reshape(matmul(reshape(x, (1, x.shape[0])), w), (w.shape[1],))
    else:
        out = matmul(x, w)
    return out if b is None else add(out, b)


# ---------------------------------------------------------------- normalisation


def softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._result(out, (x,), bw, "softmax")


def log_softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return Tensor._result(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm needs a trailing dimension of at least 2")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine params {gamma.shape}/{beta.shape} vs input {x.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    centred = x.data - x.data.sum(axis=-1, keepdims=True) / d
    inv_std = 1.0 / np.sqrt((centred * centred).sum(axis=-1, keepdims=True) / d + eps)
    xhat = centred * inv_std
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = g * gamma.data
        dx = inv_std * (
            gx - gx.sum(axis=-1, keepdims=True) / d - xhat * ((gx * xhat).sum(axis=-1, keepdims=True) / d)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._result(out, (x, gamma, beta), bw, "layer_norm")


# ---------------------------------------------------------------- row selection


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Stack the rows (axis -2) of ``a`` above those of ``b``."""
    if a.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"concat_rows: incompatible shapes {a.shape} and {b.shape}")
    m = a.shape[-2]

    def bw(g):
        return g[..., :m, :], g[..., m:, :]

    return Tensor._result(np.concatenate([a.data, b.data], axis=-2), (a, b), bw, "concat")


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous rows ``start:stop`` along axis -2."""

    def bw(g):
        full = np.zeros_like(x.data)
        full[..., start:stop, :] = g
        return (full,)

    return Tensor._result(x.data[..., start:stop, :], (x,), bw, "slice")


def gather_rows(x: Tensor, idx) -> Tensor:
    """Pick rows of ``x`` in ``idx`` order.

    ``x`` is ``[n, d]`` with a flat index list, or ``[B, n, d]`` with a
    ``[B, k]`` index array (one selection per batch item).
    """
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[-2]
    if idx.ndim != x.ndim - 1 or idx.shape[:-1] != x.shape[:-2]:
        raise ShapeError(f"gather_rows: index shape {idx.shape} does not fit tensor {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows: index out of range for {n} rows")
    srt = np.sort(idx, axis=-1)
    if np.any(srt[..., 1:] == srt[..., :-1]):
        raise IndexError("gather_rows: duplicate row index")
    take = idx[..., None]
    out = np.take_along_axis(x.data, take, axis=-2)

    def bw(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, take, g, axis=-2)
        return (full,)

    return Tensor._result(out, (x,), bw, "gather")


# ---------------------------------------------------------------- stochastic


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; returns ``x`` itself when inactive."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return Tensor._result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")
