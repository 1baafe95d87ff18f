"""Reverse-mode autodiff over numpy arrays.

A Tensor wraps an ndarray; every primitive builds the output value eagerly
and, while gradients are enabled, records a closure that routes the output
gradient back to its parents. backward() walks the recorded graph once in
reverse topological order. float32 is the working precision; float64 is
used by the finite-difference verification harness.

Every recorded primitive checks its output for NaN/Inf and raises
NumericError instead of letting a poisoned value propagate.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import erf

from .errors import NumericError

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (and the per-primitive finite checks that ride on it)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # bookkeeping ----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(())[()])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"

    # graph walk -----------------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into .grad over the recorded graph.

        The root must be scalar. Iterative post-order walk: graphs from long
        loss pipelines are deeper than the default recursion limit allows.
        """
        if self.data.size != 1:
            raise ValueError("backward() root must be a scalar")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # operator sugar ---------------------------------------------------------

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return mean_(self, axis=axis)


# machinery ------------------------------------------------------------------


def _check_finite(arr: np.ndarray, op: str):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by '{op}'")


def _result(data: np.ndarray, op: str, parents, backward_fn) -> Tensor:
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if track:
        _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = track
    out._parents = tuple(p for p in parents if p.requires_grad) if track else ()
    out._backward = backward_fn if track else None
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        # copy: g may be shared with (or be a view into) another node's buffer
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient back to the shape its operand had before broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _as_tensor(x, like: Tensor = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b):
    if isinstance(a, Tensor):
        b = _as_tensor(b, like=a)
    else:
        a = _as_tensor(a, like=b)
    if a.data.dtype != b.data.dtype:
        raise ValueError(f"dtype mismatch: {a.data.dtype} vs {b.data.dtype}")
    return a, b


# primitives -------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _result(data, "add", (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _result(data, "sub", (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(data, "mul", (a, b), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    data = -a.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, -g)

    return _result(data, "neg", (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _result(data, "matmul", (a, b), bwd)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not a.requires_grad:
            return
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape).astype(a.data.dtype, copy=False))

    return _result(np.asarray(data), "sum", (a,), bwd)


def mean_(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis), float(1.0 / n))


def max_reduce(a, axis: int) -> Tensor:
    """Max over one axis; the gradient routes to the first argmax position."""
    a = _as_tensor(a)
    data = a.data.max(axis=axis)
    idx = a.data.argmax(axis=axis)

    def bwd(g):
        if not a.requires_grad:
            return
        buf = np.zeros_like(a.data)
        np.put_along_axis(buf, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        _accum(a, buf)

    return _result(data, "max_reduce", (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    data = a.data.reshape(shape)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.data.shape))

    return _result(data, "reshape", (a,), bwd)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)
    data = np.swapaxes(a.data, ax1, ax2)

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.swapaxes(g, ax1, ax2))

    return _result(data, "swapaxes", (a,), bwd)


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    data = np.ascontiguousarray(np.broadcast_to(a.data, shape))

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))

    return _result(data, "broadcast_to", (a,), bwd)


def concat(parts, axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def bwd(g):
        start = 0
        for p, s in zip(parts, sizes):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, start + s)
                _accum(p, g[tuple(sl)])
            start += s

    return _result(data, "concat", tuple(parts), bwd)


def getitem(a, key) -> Tensor:
    """Basic indexing (ints/slices); each input element feeds at most one output."""
    a = _as_tensor(a)
    data = a.data[key]
    if isinstance(data, np.ndarray):
        data = np.ascontiguousarray(data)
    else:
        data = np.asarray(data)

    def bwd(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[key] = g
            _accum(a, buf)

    return _result(data, "getitem", (a,), bwd)


def take_rows(a, idx) -> Tensor:
    """out[i] = a[i, idx[i]] for a 2-D tensor and integer index vector."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 2 or idx.ndim != 1 or idx.shape[0] != a.data.shape[0]:
        raise ValueError("take_rows expects a (N, C) tensor and an (N,) index vector")
    rows = np.arange(a.data.shape[0])
    data = a.data[rows, idx]

    def bwd(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, (rows, idx), g)
            _accum(a, buf)

    return _result(data, "take_rows", (a,), bwd)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * data)

    return _result(data, "exp", (a,), bwd)


def log(a) -> Tensor:
    a = _as_tensor(a)
    data = np.log(a.data)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g / a.data)

    return _result(data, "log", (a,), bwd)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    data = np.maximum(a.data, 0)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * (a.data > 0))

    return _result(data, "relu", (a,), bwd)


def gelu(a) -> Tensor:
    """Exact Gaussian-error GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = (x * cdf).astype(x.dtype, copy=False)

    def bwd(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
            _accum(a, (g * (cdf + x * pdf)).astype(x.dtype, copy=False))

    return _result(data, "gelu", (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stabilized by max subtraction along the reduced axis."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            _accum(a, y * (g - dot))

    return _result(y, "softmax", (a,), bwd)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def bwd(g):
        if a.requires_grad:
            _accum(a, g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _result(y, "log_softmax", (a,), bwd)


def layernorm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply affine."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = (xhat * gain.data + bias.data).astype(x.dtype, copy=False)
    d = x.shape[-1]

    def bwd(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(a, (inv * (dxhat - m1 - xhat * m2)).astype(x.dtype, copy=False))

    return _result(data, "layernorm", (a, gain, bias), bwd)


def standardize(a, eps: float = 1e-5) -> Tensor:
    """Parameter-free layernorm: zero mean, unit variance along the last axis.

    Used to put class-token readouts on a common O(1) scale before any head;
    carries no learnable state so it never enters parameter accounting.
    """
    a = _as_tensor(a)
    one = Tensor(np.ones(a.data.shape[-1], a.data.dtype))
    zero = Tensor(np.zeros(a.data.shape[-1], a.data.dtype))
    return layernorm(a, one, zero, eps)


def l2_normalize(a, axis: int = -1) -> Tensor:
    """Scale rows to unit Euclidean norm; all-zero rows stay zero (gradient 0)."""
    a = _as_tensor(a)
    x = a.data
    n = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    safe = np.where(n > 0, n, 1.0)
    y = x / safe

    def bwd(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            dx = (g - y * dot) / safe
            _accum(a, np.where(n > 0, dx, 0.0).astype(x.dtype, copy=False))

    return _result(y.astype(x.dtype, copy=False), "l2_normalize", (a,), bwd)
