"""Minimal tape-free reverse-mode differentiation over numpy arrays.

Every ``Tensor`` produced by an op remembers its parents and a closure that
maps the upstream gradient to one gradient per parent. ``backward`` walks the
graph in reverse topological order and accumulates gradients.

Only the primitives this detection pipeline needs are provided.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 parents: tuple = (), backward_fn: BackwardFn | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    if dtype is None and arr.dtype.kind in "iub":
        arr = arr.astype(np.float64)
    return Tensor(arr)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data), requires_grad=True, name=name)


def make(data: np.ndarray, parents: Iterable, backward_fn: BackwardFn) -> Tensor:
    """Wrap an op result; records the graph edge only if a parent needs grad."""
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn)
    return Tensor(data)


def _result_dtype(*arrays):
    return np.result_type(*[a.dtype for a in arrays if a.dtype.kind == "f"] or [np.float64])


def unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.dtype.kind == "f" and b.dtype != a.dtype and not b.requires_grad and b.data.ndim == 0:
        b = Tensor(b.data.astype(a.dtype))
    elif b.dtype.kind == "f" and a.dtype != b.dtype and not a.requires_grad and a.data.ndim == 0:
        a = Tensor(a.data.astype(b.dtype))
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return make(ad * bd, (a, b),
                lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make(out, (a, b),
                lambda g: (unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make(out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make(a.data * mask, (a,), lambda g: (g * mask,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return make(out, (a,), lambda g: (g * sig,))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = _pair(a, b)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)
    sa, sb = a.shape, b.shape
    return make(out, (a, b), lambda g: (unbroadcast(g * take_a, sa), unbroadcast(g * ~take_a, sb)))


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return make(np.where(cond, a.data, b.data), (a, b),
                lambda g: (unbroadcast(g * cond, sa), unbroadcast(g * ~cond, sb)))


# ------------------------------------------------------------------ reductions

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make(out, (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / max(int(n), 1))


# ---------------------------------------------------------------- structural

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return make(a.data[index], (a,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make(out, tensors, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return make(out, tensors, backward)


def segment_sum_array(values: np.ndarray, segments: np.ndarray, num_segments: int) -> np.ndarray:
    """Sum rows of ``values`` into ``num_segments`` buckets (unbuffered scatter-add)."""
    out = np.zeros((num_segments,) + values.shape[1:], dtype=values.dtype)
    if len(segments) == 0:
        return out
    order = np.argsort(segments, kind="stable")
    seg_sorted = segments[order]
    starts = np.flatnonzero(np.r_[True, seg_sorted[1:] != seg_sorted[:-1]])
    out[seg_sorted[starts]] = np.add.reduceat(values[order], starts, axis=0)
    return out


def gather_rows(a, index: np.ndarray) -> Tensor:
    """``a[index]`` along axis 0; backward is a transpose scatter-add."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]
    flat = index.reshape(-1)

    def backward(g):
        g2 = g.reshape((len(flat),) + g.shape[index.ndim:])
        return (segment_sum_array(g2, flat, n),)

    return make(a.data[index], (a,), backward)


def segment_mean(a, segments: np.ndarray, num_segments: int) -> Tensor:
    """Mean of rows of ``a`` per segment id; empty segments give zero rows."""
    a = as_tensor(a)
    segments = np.asarray(segments, dtype=np.int64)
    counts = np.bincount(segments, minlength=num_segments).astype(a.dtype)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0).astype(a.dtype)
    inv = inv.reshape((-1,) + (1,) * (a.ndim - 1))
    out = segment_sum_array(a.data, segments, num_segments) * inv

    def backward(g):
        return ((g * inv)[segments],)

    return make(out, (a,), backward)


def standardize(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-column ``gamma * (a - mean) / sqrt(var + eps) + beta`` over the rows of ``a``.

    Statistics are taken over the rows present, so a single row maps to
    ``beta``.
    """
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    x = a.data
    n = x.shape[0]
    mu = x.mean(axis=0) if n else np.zeros(x.shape[1:], dtype=x.dtype)
    xc = x - mu
    var = (xc * xc).mean(axis=0) if n else np.zeros_like(mu)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        dbeta = g.sum(axis=0)
        dgamma = (g * xhat).sum(axis=0)
        gh = g * gamma.data
        dx = None
        if a.requires_grad and n:
            dx = inv * (gh - gh.mean(axis=0) - xhat * (gh * xhat).mean(axis=0))
        elif a.requires_grad:
            dx = np.zeros_like(x)
        return (dx, dgamma, dbeta)

    return make(out.astype(x.dtype), (a, gamma, beta), backward)


# --------------------------------------------------------------- losses etc.

def huber_norm(d, delta: float = 1.0) -> Tensor:
    """Huber of the Euclidean norm over the last axis of ``d``.

    Written directly in terms of the squared norm so the gradient is finite
    at zero distance.
    """
    d = as_tensor(d)
    x = d.data
    s = np.sum(x * x, axis=-1)
    r = np.sqrt(s)
    quad = r <= delta
    out = np.where(quad, 0.5 * s, delta * (r - 0.5 * delta))
    scale = np.where(quad, 1.0, delta / np.maximum(r, 1e-300)).astype(x.dtype)
    return make(out.astype(x.dtype), (d,), lambda g: ((g * scale)[..., None] * x,))


def bce_with_logits(logits, labels: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on raw logits, numerically stable."""
    logits = as_tensor(logits)
    x = logits.data
    y = np.asarray(labels, dtype=x.dtype)
    out = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return make(out, (logits,), lambda g: (g * (sig - y),))


# ------------------------------------------------------------------ backward

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, seed: np.ndarray | None = None) -> dict[int, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Leaf tensors that require grad get ``.grad`` accumulated. Returns the
    gradient of every visited node keyed by ``id``.

    Raises:
        ValueError: if ``loss`` is not a scalar.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar seed, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data) if seed is None else seed}
    if not loss.requires_grad:
        return grads
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            grads[id(node)] = g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads
