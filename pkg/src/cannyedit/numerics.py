"""Dense float64 tensors with a dynamic reverse-mode tape.

Operations only record themselves while a :class:`Graph` is active (``with
Graph():``); outside one they are plain numpy calls wrapped in ``Tensor``.
Binary ops require equal shapes. Broadcasting is explicit via :func:`expand`,
except for scalar multiplication.
"""
from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeMismatch

_local = threading.local()


def _active() -> "Graph | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Graph:
    """Ordered record of the ops of one forward pass (creation order is topological)."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Graph":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def backward(self, loss: "Tensor") -> None:
        backward(loss)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_graph", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._graph: Graph | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    graph = _active()
    if graph is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._graph = graph
        graph.nodes.append(out)
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation."""
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _make(out, (a,), back)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """``(..., m, k) @ (..., k, n)``; ``b`` may also be a plain 2-D matrix."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(f"matmul: batch dims {a.shape[:-2]} vs {b.shape[:-2]}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), back)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, back)


def take(a: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""
    src_shape = a.shape

    def back(g):
        full = np.zeros(src_shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), back)


def expand(a: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast of ``a`` to ``shape``."""
    shape = tuple(shape)
    src = a.shape
    out = np.broadcast_to(a.data, shape).copy()

    def back(g):
        lead = len(shape) - len(src)
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make(out, (a,), back)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    return add(x, expand(b, x.shape))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else bias_add(y, b)


# ---------------------------------------------------------------- reductions

def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    src = a.shape

    def back(g):
        if axis is None:
            return (np.full(src, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _make(np.sum(a.data, axis=axis), (a,), back)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis), 1.0 / float(n))


# ---------------------------------------------------------------- normalisation / attention

def softmax(x: Tensor, axis: int = -1, allow=None, bias=None) -> Tensor:
    """Softmax with optional constant additive ``bias`` and boolean ``allow`` mask.

    Disallowed entries are excluded (weight exactly 0); every slice along
    ``axis`` must keep at least one allowed entry.
    """
    z = x.data
    if bias is not None:
        z = z + bias
    if allow is not None:
        allow = np.broadcast_to(allow, z.shape)
        if not allow.any(axis=axis).all():
            raise ValueError("fully-masked-row: a softmax row has no allowed entry")
        z = np.where(allow, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def back(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), back)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance (no affine)."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make(y, (x,), back)


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """Negative log-likelihood of ``target`` under a 1-D logit vector."""
    lp = log_softmax(logits, axis=-1)
    return scale(take(lp, target), -1.0)


# ---------------------------------------------------------------- backward

def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad leaf that ``loss`` depends on."""
    if loss.data.size != 1:
        raise ValueError(f"non-scalar-loss: backward needs a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._backward is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    graph = loss._graph
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    end = len(graph.nodes)
    for i in range(end - 1, -1, -1):
        node = graph.nodes[i]
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            if p._backward is None:
                p.grad = pg.copy() if p.grad is None else p.grad + pg
            else:
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max componentwise gap between tape and central-difference gradients.

    The gap is divided by the larger of the two gradients' max-abs entries, so
    components whose true gradient is ~0 do not dominate. Returns 0 when both
    gradients vanish.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    with Graph():
        loss = f(leaf)
        backward(loss)
    analytic = np.zeros_like(x0) if leaf.grad is None else leaf.grad
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(x0)).data)
        flat[i] = orig - h
        fm = float(f(Tensor(x0)).data)
        flat[i] = orig
        num_flat[i] = (fp - fm) / (2.0 * h)
    scale_ = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale_ == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale_)
