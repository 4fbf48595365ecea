"""Reverse-mode automatic differentiation over float64 numpy arrays.

A Tensor records the operation that produced it; backward() walks the
graph in reverse topological order and accumulates gradients into
Parameter slots. All arithmetic is float64. Reductions that mix values
across time frames (softmax denominators, attention contexts) sort their
addends first, so results are independent of frame order down to the
last bit; see softmax_rows / attend.
"""

from __future__ import annotations

import numpy as np

from .errors import StateError

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Parameter:
    """A learnable tensor paired with a persistent gradient slot."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


class Tensor:
    """Node in the computation graph."""

    __slots__ = ("value", "grad", "_parents", "_bwd", "sink")

    def __init__(self, value, parents=(), bwd=None, sink=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        if _GRAD_ENABLED:
            self._parents = parents
            self._bwd = bwd
        else:
            self._parents = ()
            self._bwd = None
        self.sink = sink

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        return float(self.value)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param_tensor(p: Parameter) -> Tensor:
    """Graph leaf backed by a Parameter; backward() flushes into p.grad."""
    return Tensor(p.value, sink=p)


def _accum(t: Tensor, g: np.ndarray):
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient back to the shape it was broadcast from."""
    g = np.asarray(g)
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(root: Tensor, seed=None) -> None:
    """Accumulate d(root)/d(leaf) into every Parameter sink reachable from root.

    seed defaults to ones; pass an array matching root.shape to weight the
    output (e.g. 1/batch for averaged losses).
    """
    if root._bwd is None and not root._parents and root.sink is None:
        raise StateError("backward() on a constant tensor; was forward run with gradients enabled?")
    order = []
    seen = set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.value) if seed is None else np.asarray(seed, dtype=np.float64)
    for node in reversed(order):
        if node.grad is None:
            continue
        if node._bwd is not None:
            node._bwd(node.grad)
        if node.sink is not None:
            node.sink.grad = node.sink.grad + node.grad


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_val = a.value + b.value

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return Tensor(out_val, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_val = a.value - b.value

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return Tensor(out_val, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_val = a.value * b.value

    def bwd(g):
        _accum(a, _unbroadcast(g * b.value, a.shape))
        _accum(b, _unbroadcast(g * a.value, b.shape))

    return Tensor(out_val, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_val = a.value / b.value

    def bwd(g):
        _accum(a, _unbroadcast(g / b.value, a.shape))
        _accum(b, _unbroadcast(-g * a.value / (b.value**2), b.shape))

    return Tensor(out_val, (a, b), bwd)


def power(a, p) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out_val = a.value**p

    def bwd(g):
        _accum(a, g * p * a.value ** (p - 1.0))

    return Tensor(out_val, (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_val = a.value @ b.value

    def bwd(g):
        _accum(a, g @ b.value.T)
        _accum(b, a.value.T @ g)

    return Tensor(out_val, (a, b), bwd)


def transpose(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        _accum(a, g.T)

    return Tensor(a.value.T, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape

    def bwd(g):
        _accum(a, g.reshape(old))

    return Tensor(a.value.reshape(shape), (a,), bwd)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g)
        _accum(a, full)

    return Tensor(a.value[idx], (a,), bwd)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return Tensor(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors), bwd)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_val = a.value.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return Tensor(out_val, (a,), bwd)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_val = np.exp(a.value)

    def bwd(g):
        _accum(a, g * out_val)

    return Tensor(out_val, (a,), bwd)


def log(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        _accum(a, g / a.value)

    return Tensor(np.log(a.value), (a,), bwd)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_val = np.sqrt(a.value)

    def bwd(g):
        _accum(a, g * 0.5 / out_val)

    return Tensor(out_val, (a,), bwd)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_val = np.tanh(a.value)

    def bwd(g):
        _accum(a, g * (1.0 - out_val**2))

    return Tensor(out_val, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out_val = 1.0 / (1.0 + np.exp(-a.value))

    def bwd(g):
        _accum(a, g * out_val * (1.0 - out_val))

    return Tensor(out_val, (a,), bwd)


def relu(a) -> Tensor:
    a = as_tensor(a)
    keep = a.value > 0

    def bwd(g):
        _accum(a, g * keep)

    return Tensor(np.where(keep, a.value, 0.0), (a,), bwd)


def silu(a) -> Tensor:
    """x * sigmoid(x), the FFN activation."""
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.value))
    out_val = a.value * s

    def bwd(g):
        _accum(a, g * s * (1.0 + a.value * (1.0 - s)))

    return Tensor(out_val, (a,), bwd)


def hypot(re, im) -> Tensor:
    """sqrt(re^2 + im^2) with a zero-safe gradient at the origin."""
    re, im = as_tensor(re), as_tensor(im)
    out_val = np.hypot(re.value, im.value)
    safe = np.where(out_val > 0.0, out_val, 1.0)

    def bwd(g):
        scale = g / safe
        _accum(re, scale * re.value)
        _accum(im, scale * im.value)

    return Tensor(out_val, (re, im), bwd)


def detach(a) -> Tensor:
    return Tensor(as_tensor(a).value)


def _canonical_sum(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Order-independent reduction: sort the addends, then fold a fixed
    binary tree (numpy's own axis reductions vary with operand position,
    which would leak frame order into results at the last bit)."""
    s = np.ascontiguousarray(np.moveaxis(x, axis, -1))
    if s is x or s.base is not None:
        s = s.copy()
    s.sort(axis=-1)
    n = s.shape[-1]
    size = 1 << (n - 1).bit_length() if n > 1 else 1
    if size != n:
        buf = np.zeros(s.shape[:-1] + (size,))
        buf[..., :n] = s
        s = buf
    while s.shape[-1] > 1:
        half = s.shape[-1] // 2
        s = s[..., :half] + s[..., half:]
    return s[..., 0]


def softmax_rows(a) -> Tensor:
    """Row softmax whose result does not depend on column order.

    Max and sorted-sum reductions are order-independent, so permuting the
    columns (and rows) of the score matrix permutes the output exactly.
    """
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_val = e / _canonical_sum(e, axis=1)[:, None]

    def bwd(g):
        inner = np.sum(g * out_val, axis=1, keepdims=True)
        _accum(a, out_val * (g - inner))

    return Tensor(out_val, (a,), bwd)


def attend(p, v) -> Tensor:
    """Attention context p @ v with an order-independent sum over keys."""
    p, v = as_tensor(p), as_tensor(v)
    # (queries, channels, keys): keys land on the contiguous axis for the sort
    prod = p.value[:, None, :] * v.value.T[None, :, :]
    out_val = _canonical_sum(prod, axis=-1)

    def bwd(g):
        _accum(p, g @ v.value.T)
        _accum(v, p.value.T @ g)

    return Tensor(out_val, (p, v), bwd)


def take(a, idx) -> Tensor:
    """Gather a.value[idx] for an integer index array; adjoint scatter-adds."""
    a = as_tensor(a)

    def bwd(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g)
        _accum(a, full)

    return Tensor(a.value[idx], (a,), bwd)


def scatter_add(a, idx, size: int) -> Tensor:
    """Scatter-add rows/elements of a into a length-`size` buffer (overlap-add)."""
    a = as_tensor(a)
    out_val = np.zeros(size)
    np.add.at(out_val, idx, a.value)

    def bwd(g):
        _accum(a, g[idx])

    return Tensor(out_val, (a,), bwd)


def depthwise_conv1d(x, w) -> Tensor:
    """Per-channel temporal convolution with same zero padding.

    x: (S, H) features over time, w: (K, H) per-channel kernels, K odd.
    """
    x, w = as_tensor(x), as_tensor(w)
    n_frames, width = x.shape
    kernel = w.shape[0]
    half = kernel // 2
    xp = np.zeros((n_frames + kernel - 1, width))
    xp[half : half + n_frames] = x.value
    out_val = np.zeros((n_frames, width))
    for k in range(kernel):
        out_val += xp[k : k + n_frames] * w.value[k]

    def bwd(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros(w.shape)
        for k in range(kernel):
            gxp[k : k + n_frames] += g * w.value[k]
            gw[k] = np.sum(xp[k : k + n_frames] * g, axis=0)
        _accum(x, gxp[half : half + n_frames])
        _accum(w, gw)

    return Tensor(out_val, (x, w), bwd)


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Per-row layer norm composed from primitive ops."""
    x = as_tensor(x)
    m = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, m)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    normed = div(centered, sqrt(add(var, eps)))
    return add(mul(normed, gamma), beta)
