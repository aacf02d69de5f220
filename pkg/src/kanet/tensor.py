"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations the adapter, encoder and losses need are provided.
Storage is a numpy array; float32 is the compute dtype and float64 is used
for gradient checks.  Operations are recorded only while a :class:`Tape` is
active and at least one input requires a gradient, so evaluation outside a
tape is plain numpy.
"""
from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

COSINE_EPS = 1e-12
LAYERNORM_EPS = 1e-5
LOG_CLAMP = 1e-12

_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    pass


class Tape:
    """Ordered record of op nodes.

    Nodes are appended when created, so the list is already topologically
    sorted: every parent precedes its children.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    @staticmethod
    def current() -> Optional["Tape"]:
        return Tape._stack[-1] if Tape._stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return swap_last(self)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = Tape.current()
    out = Tensor(data)
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(p) into ``p.grad`` for every leaf on the tape.

    Leaves that do not require gradients never get grad storage. Gradients
    from repeated use of one tensor are summed.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires a gradient")
    if not any(node is loss for node in tape.nodes):
        raise ValueError("loss was not recorded on this tape")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        grads = node._backward(g)
        for parent, pg in zip(node._parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                # leaf parameter
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=parent.dtype, copy=True)
                else:
                    parent.grad += pg
            else:
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(a.data + b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)

    return _node(a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(out, (a,), bw)


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node(np.asarray(a.data.sum(axis=axis)), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def mean_rows(a: Tensor) -> Tensor:
    """Mean over the first axis: ``[n, D] -> [D]``."""
    if a.shape[0] == 0:
        raise ValueError("mean_rows of an empty tensor")
    return mean(a, axis=0)


# ---------------------------------------------------------------- structural


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    sa, sb = a.shape, b.shape

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), sa)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, sb)
        return ga, gb

    return _node(a.data @ b.data, (a, b), bw)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of nothing")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=0)


def index(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _node(np.asarray(a.data[idx]), (a,), bw)


# ---------------------------------------------------------------- composite


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax: exp(v - max v) / sum."""
    if a.data.size == 0 or a.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (a,), bw)


softmax_stable = softmax


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm params {gamma.shape}/{beta.shape} do not match last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            gxhat = g * gamma.data
            gx = inv * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return _node(out, (x, gamma, beta), bw)


def cosine(a: Tensor, b: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Cosine similarity with the norm product clamped below at ``eps``.

    For 1-d inputs the result is a scalar. For ``[n, D]`` and ``[m, D]``
    inputs the result is the ``[n, m]`` matrix of pairwise cosines.
    """
    vector = a.ndim == 1
    if vector != (b.ndim == 1):
        raise ShapeError(f"cosine operands disagree: {a.shape} vs {b.shape}")
    A = a.data.reshape(1, -1) if vector else a.data
    B = b.data.reshape(1, -1) if vector else b.data
    if A.shape[-1] != B.shape[-1]:
        raise ShapeError(f"cosine dims differ: {a.shape} vs {b.shape}")
    if A.shape[-1] < 1:
        raise ShapeError("cosine of zero-length vectors")
    na = np.sqrt((A * A).sum(axis=1))
    nb = np.sqrt((B * B).sum(axis=1))
    prod = np.outer(na, nb)
    active = prod > eps
    den = np.where(active, prod, eps)
    s = (A @ B.T) / den
    out = s.reshape(()) if vector else s

    def bw(g):
        G = np.reshape(g, s.shape)
        Gd = G / den
        Ga = np.where(active, G * s, 0.0)
        ga = gb = None
        if a.requires_grad:
            na2 = np.where(na > 0, na * na, 1.0)
            ga = Gd @ B - (Ga.sum(axis=1) / na2)[:, None] * A
            ga = ga.reshape(a.shape)
        if b.requires_grad:
            nb2 = np.where(nb > 0, nb * nb, 1.0)
            gb = Gd.T @ A - (Ga.sum(axis=0) / nb2)[:, None] * B
            gb = gb.reshape(b.shape)
        return ga, gb

    return _node(np.asarray(out, dtype=A.dtype), (a, b), bw)


def cross_entropy(probs: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under row-stochastic ``probs``."""
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ShapeError(f"cross_entropy expects [B, C] probs and B labels, got {probs.shape}, {labels.shape}")
    n, c = probs.shape
    if n == 0:
        raise ValueError("cross_entropy of an empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    rows = np.arange(n)
    p = probs.data[rows, labels]
    clamped = np.maximum(p, LOG_CLAMP)
    loss = -np.log(clamped).mean()

    def bw(g):
        out = np.zeros_like(probs.data)
        out[rows, labels] = np.where(p > LOG_CLAMP, -1.0 / (n * clamped), 0.0)
        return (out * g,)

    return _node(np.asarray(loss, dtype=probs.dtype), (probs,), bw)
