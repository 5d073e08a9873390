"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every trainable quantity in the package is a :class:`Value`. Operations build a
graph of parent links and local backward closures; :meth:`Value.backward` walks
that graph in reverse topological order and accumulates gradients into every
node that requires them.

Broadcasting follows numpy rules; gradients are summed back to operand shapes.
"""
from __future__ import annotations

import zlib

import numpy as np
from scipy.special import expit, ndtr

from .errors import DimensionError, NumericDomainError, ProbabilityDomainError

EPS = 1e-8
_SQRT_2PI = np.sqrt(2.0 * np.pi)


class Value:
    """A node in the computation graph.

    ``data`` is always a float64 array. ``grad`` is a same-shape buffer for nodes
    with ``requires_grad`` and ``None`` otherwise.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op=""):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Value(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Value(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(node) into every reachable node that requires grad."""
        if not self.requires_grad:
            return
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self.grad = self.grad + np.asarray(grad, dtype=np.float64)
        for node in reversed(order):
            if node._backward is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)


def _topological_order(root):
    order, seen = [], set()
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_value(x):
    return x if isinstance(x, Value) else Value(x)


def parameter(data):
    """Leaf that requires grad."""
    return Value(data, requires_grad=True)


def _node(data, parents, backward, op):
    requires = any(p.requires_grad for p in parents)
    out = Value(data, requires_grad=requires, _parents=parents if requires else (),
                _backward=backward if requires else None, op=op)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    a, b = as_value(a), as_value(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_value(a), as_value(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_value(a), as_value(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b):
    a, b = as_value(a), as_value(b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _node(out, (a, b), backward, "div")


def neg(a):
    a = as_value(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent):
    a = as_value(a)
    p = float(exponent)
    return _node(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def square(a):
    a = as_value(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def exp(a):
    a = as_value(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_value(a)
    if np.any(a.data <= 0):
        raise NumericDomainError("log of a non-positive value")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    a = as_value(a)
    if np.any(a.data < 0):
        raise NumericDomainError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


# ------------------------------------------------------------- nonlinearities

def relu(a):
    a = as_value(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def gelu(a):
    """Exact GELU, x * Phi(x)."""
    a = as_value(a)
    cdf = ndtr(a.data)
    pdf = np.exp(-0.5 * a.data * a.data) / _SQRT_2PI
    return _node(a.data * cdf, (a,), lambda g: (g * (cdf + a.data * pdf),), "gelu")


def softplus(a):
    a = as_value(a)
    return _node(np.logaddexp(0.0, a.data), (a,), lambda g: (g * expit(a.data),), "softplus")


def sigmoid(a):
    a = as_value(a)
    out = expit(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a):
    a = as_value(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    a = as_value(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_value(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _node(out, (a,), backward, "mean")


def std(a, axis=None, keepdims=False, eps=0.0):
    """Population standard deviation, sqrt(var + eps)."""
    a = as_value(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    centered = a.data - a.data.mean(axis=axes, keepdims=True)
    var = (centered * centered).mean(axis=axes, keepdims=True)
    sd = np.sqrt(var + eps)
    out = sd if keepdims else np.squeeze(sd, axis=axes)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        with np.errstate(divide="ignore", invalid="ignore"):
            local = np.where(sd > 0, centered / (n * sd), 0.0)
        return (g * local,)

    return _node(out, (a,), backward, "std")


# ------------------------------------------------------------------ shaping

def reshape(a, shape):
    a = as_value(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def swapaxes(a, axis1, axis2):
    a = as_value(a)
    return _node(np.swapaxes(a.data, axis1, axis2), (a,),
                 lambda g: (np.swapaxes(g, axis1, axis2),), "swapaxes")


def transpose(a):
    """Swap the last two axes."""
    return swapaxes(a, -1, -2)


def concat(values, axis=-1):
    values = [as_value(v) for v in values]
    out = np.concatenate([v.data for v in values], axis=axis)
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(values), backward, "concat")


def getitem(a, index):
    a = as_value(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out), (a,), backward, "getitem")


def gather_rows(a, rows):
    """``a[rows]`` along axis 0."""
    a = as_value(a)
    rows = np.asarray(rows, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, rows, g)
        return (full,)

    return _node(a.data[rows], (a,), backward, "gather_rows")


def scatter_rows(a, rows, n):
    """Place rows of ``a`` at positions ``rows`` of an ``n``-row zero array."""
    a = as_value(a)
    rows = np.asarray(rows, dtype=np.intp)
    out = np.zeros((n,) + a.shape[1:])
    np.add.at(out, rows, a.data)
    return _node(out, (a,), lambda g: (g[rows],), "scatter_rows")


# ------------------------------------------------------------------- linalg

def matmul(a, b):
    a, b = as_value(a), as_value(b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError(f"matmul needs at least 1-d operands, got {a.shape} and {b.shape}")
    inner_b = b.shape[-2] if b.ndim > 1 else b.shape[0]
    if a.shape[-1] != inner_b:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        A = a.data if a.ndim > 1 else a.data[None, :]
        B = b.data if b.ndim > 1 else b.data[:, None]
        G = g
        if b.ndim == 1:
            G = np.expand_dims(G, -1)
        if a.ndim == 1:
            G = np.expand_dims(G, -2)
        ga = np.matmul(G, np.swapaxes(B, -1, -2))
        gb = np.matmul(np.swapaxes(A, -1, -2), G)
        ga = _unbroadcast(ga, A.shape).reshape(a.shape)
        gb = _unbroadcast(gb, B.shape).reshape(b.shape)
        return ga, gb

    return _node(out, (a, b), backward, "matmul")


# -------------------------------------------------------- normalisations

def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise NumericDomainError(f"{what} received non-finite input")


def softmax(a, axis=-1):
    a = as_value(a)
    _check_finite(a.data, "softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), backward, "softmax")


def log_softmax(a, axis=-1):
    a = as_value(a)
    _check_finite(a.data, "log_softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), backward, "log_softmax")


def layer_norm(x, gain, bias, eps=EPS):
    """Normalise the last axis to zero mean / unit variance, then apply gain and bias."""
    x, gain, bias = as_value(x), as_value(gain), as_value(bias)
    d = x.shape[-1]
    if eps == 0 and d == 1:
        raise NumericDomainError("layer_norm over a single feature with eps=0 divides by zero")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    if eps == 0 and np.any(var == 0):
        raise NumericDomainError("layer_norm with eps=0 on a zero-variance row")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _node(out, (x, gain, bias), backward, "layer_norm")


# ------------------------------------------------------- vector geometry

def l2_norm(a, axis=-1):
    """Euclidean norm along ``axis`` (subgradient 0 at the origin)."""
    a = as_value(a)
    n = np.sqrt((a.data * a.data).sum(axis=axis))

    def backward(g):
        nk = np.expand_dims(n, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            local = np.where(nk > 0, a.data / nk, 0.0)
        return (np.expand_dims(g, axis) * local,)

    return _node(n, (a,), backward, "l2_norm")


def cosine_similarity(a, b, axis=-1):
    a, b = as_value(a), as_value(b)
    na = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=axis, keepdims=True))
    if np.any(na == 0) or np.any(nb == 0):
        raise NumericDomainError("cosine similarity of a zero-norm vector")
    dot = (a.data * b.data).sum(axis=axis, keepdims=True)
    c = dot / (na * nb)

    def backward(g):
        gk = np.expand_dims(g, axis)
        ga = gk * (b.data / (na * nb) - c * a.data / (na * na))
        gb = gk * (a.data / (na * nb) - c * b.data / (nb * nb))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(np.squeeze(c, axis=axis), (a, b), backward, "cosine")


def entropy(p, axis=-1):
    """Shannon entropy in nats, with 0 ln 0 taken as 0."""
    p = as_value(p)
    if np.any(p.data < 0):
        raise ProbabilityDomainError("entropy of a vector with negative entries")
    if np.any(np.abs(p.data.sum(axis=axis) - 1.0) > 1e-6):
        raise ProbabilityDomainError("entropy of a vector that does not sum to 1")
    positive = p.data > 0
    logp = np.log(np.where(positive, p.data, 1.0))
    out = -(p.data * logp).sum(axis=axis)

    def backward(g):
        return (np.where(positive, -(logp + 1.0), 0.0) * np.expand_dims(g, axis),)

    return _node(out, (p,), backward, "entropy")


# -------------------------------------------------------------------- rng

def make_rng(seed, *stream):
    """Seeded PCG64 generator, optionally for a named substream.

    Substreams are keyed by strings or ints; the same (seed, stream) pair always
    yields the same draws.
    """
    keys = tuple(k if isinstance(k, int) else zlib.crc32(str(k).encode()) for k in stream)
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=keys)
    return np.random.Generator(np.random.PCG64(seq))


def split_rng(rng, n):
    """Derive ``n`` independent child generators from ``rng``."""
    return [np.random.Generator(np.random.PCG64(s))
            for s in np.random.SeedSequence(rng.integers(0, 2**63)).spawn(n)]
