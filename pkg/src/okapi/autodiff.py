"""Small reverse-mode automatic differentiation over dense float64 arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. ``backward`` walks
the graph in reverse topological order. Gradients accumulate (``+=``) across
calls until :meth:`Tensor.zero_grad` is called.

Broadcasting is limited to bias-style addition/multiplication over the last
axis; everything else must conform exactly.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: shape mismatch {joined}")


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Build outputs without recording parents (inference only)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "_grad", "op", "parents", "_backward", "name")

    def __init__(self, data, parents: Sequence["Tensor"] = (), op: str = "leaf",
                 backward: Callable | None = None, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self._grad = None
        self.op = op
        self.parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = np.asarray(value, dtype=np.float64)

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    # operator sugar, all routed through the op functions below
    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(like.shape, float(arr))
    return Tensor(arr, op="const")


def constant(data) -> Tensor:
    return Tensor(data, op="const")


def _make(data, parents, op, backward) -> Tensor:
    if _grad_enabled():
        return Tensor(data, parents, op, backward)
    return Tensor(data, (), op, None)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, every parent before its child."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``node.grad`` for every reachable node."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topological_order(loss)
    # gradients of this pass only; folded into .grad at the end so repeated
    # calls accumulate exactly once per call
    local: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = local.get(id(node))
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            key = id(p)
            if key in local:
                local[key] = local[key] + pg
            else:
                local[key] = pg
    for node in order:
        g = local.get(id(node))
        if g is not None:
            node._grad = g.copy() if node._grad is None else node._grad + g


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead > 0 else g
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _bias_compatible(a: tuple, b: tuple) -> bool:
    return a == b or (len(b) == 1 and len(a) >= 1 and a[-1] == b[0])


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    if not _bias_compatible(a.shape, b.shape):
        raise ShapeError("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (g, _sum_to(g, sb) if sb != sa else g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if not _bias_compatible(a.shape, b.shape):
        raise ShapeError("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (g, -(_sum_to(g, sb) if sb != sa else g)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if not _bias_compatible(a.shape, b.shape):
        raise ShapeError("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    sb = b.shape
    return _make(ad * bd, (a, b), "mul",
                 lambda g: (g * bd, _sum_to(g * ad, sb)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), "scale", lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), "log", lambda g: (g / ad,))


def sigmoid(a: Tensor) -> Tensor:
    out = _np_sigmoid(a.data)
    return _make(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)) without overflow."""
    x = a.data
    out = np.logaddexp(0.0, x)
    return _make(out, (a,), "softplus", lambda g: (g * _np_sigmoid(x),))


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    c = np.sqrt(2.0 / np.pi)
    x2 = x * x
    t = np.tanh(c * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), "gelu", bw)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), "clip", lambda g: (g * inside,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("minimum", a.shape, b.shape)
    pick_a = a.data <= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b), "minimum",
                 lambda g: (g * pick_a, g * ~pick_a))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("maximum", a.shape, b.shape)
    pick_a = a.data >= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b), "maximum",
                 lambda g: (g * pick_a, g * ~pick_a))


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true; ``mask`` broadcasts against ``a``."""
    mask = np.asarray(mask, dtype=bool)
    try:
        out = np.where(mask, value, a.data)
    except ValueError:
        raise ShapeError("masked_fill", a.shape, mask.shape) from None
    if out.shape != a.shape:
        raise ShapeError("masked_fill", a.shape, mask.shape)
    keep = ~mask
    return _make(out, (a,), "masked_fill", lambda g: (g * keep,))


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ------------------------------------------------------------------ linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for (..., n, k) @ (k, m) or matching batched (..., k, m)."""
    sa, sb = a.shape, b.shape
    if a.data.ndim < 2 or b.data.ndim < 2 or sa[-1] != sb[-2]:
        raise ShapeError("matmul", sa, sb)
    if b.data.ndim > 2 and sa[:-2] != sb[:-2]:
        raise ShapeError("matmul", sa, sb)
    ad, bd = a.data, b.data
    out = ad @ bd

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, sa[-1]).T @ g.reshape(-1, sb[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), "matmul", bw)


def embedding(weight: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if weight.data.ndim != 2:
        raise ShapeError("embedding", weight.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise IndexError(f"embedding: index out of range for table {weight.shape}")
    wshape = weight.shape

    def bw(g):
        gw = np.zeros(wshape)
        np.add.at(gw, idx.reshape(-1), g.reshape(-1, wshape[1]))
        return (gw,)

    return _make(weight.data[idx], (weight,), "embedding", bw)


def gather_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[...] = a[..., idx[...]]; ``idx`` has ``a``'s shape minus the last axis."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != a.shape[:-1]:
        raise ShapeError("gather_last", a.shape, idx.shape)
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]
    shape = a.shape

    def bw(g):
        ga = np.zeros(shape)
        np.put_along_axis(ga, idx[..., None], g[..., None], axis=-1)
        return (ga,)

    return _make(out, (a,), "gather", bw)


# ---------------------------------------------------------------- structure

def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, shape) from None
    return _make(out, (a,), "reshape", lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), "transpose",
                 lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    nd = tensors[0].data.ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.data.ndim != nd or any(t.shape[i] != tensors[0].shape[i]
                                    for i in range(nd) if i != ax):
            raise ShapeError("concat", tensors[0].shape, t.shape)
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(out, tensors, "concat",
                 lambda g: tuple(np.split(g, splits, axis=ax)))


def slice_(a: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing: ints and slices."""
    shape = a.shape

    def bw(g):
        ga = np.zeros(shape)
        ga[index] = g
        return (ga,)

    return _make(np.array(a.data[index]), (a,), "slice", bw)


def sum_(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(out, (a,), "sum", bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


# ------------------------------------------------------------ normalisation

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), "softmax", bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), "log_softmax", bw)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", a.shape, gain.shape, bias.shape)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        gx_hat = g * gd
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _sum_to(g * xhat, (d,)), _sum_to(g, (d,))

    return _make(out, (a, gain, bias), "layer_norm", bw)


class Graph:
    """Seeded random state for parameter creation plus node bookkeeping.

    Identical seed and identical op sequence give bit-identical arrays.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def param(self, shape, std: float = 0.02, name: str | None = None) -> Tensor:
        return Tensor(self.rng.normal(0.0, std, size=shape), name=name)

    def zeros(self, shape, name: str | None = None) -> Tensor:
        return Tensor(np.zeros(shape), name=name)

    @staticmethod
    def nodes(root: Tensor) -> list[Tensor]:
        return topological_order(root)
