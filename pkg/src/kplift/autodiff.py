"""Reverse-mode automatic differentiation over dense float64 arrays.

A small dynamic-graph engine: every operation eagerly computes its numpy
result and, when any input participates in differentiation, records its
parent tensors plus a backward closure on the output. `gradient_of` walks
the recorded graph in reverse topological order, visiting each node exactly
once and accumulating adjoints.

Tensors are treated as immutable once created. Parameter updates rebind the
`.data` attribute with a fresh array between training steps (graphs are
rebuilt per step), so no live graph ever observes a mutation.

All arithmetic is binary64; ReLU uses the subgradient 0 at the origin, and
`abs` likewise. Finite-difference checking near such kinks is unreliable, so
`kink_trace` lets a caller observe how close any ReLU/abs input came to zero
during a forward pass and re-sample the configuration if needed.

Ops are written with an explicit constant fast path (no closure, no parent
tuple) because inference and finite-difference sweeps spend most of their
time there; keep that pattern when adding ops.
"""
from __future__ import annotations

import contextlib

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "kink_trace",
    "gradient_of",
    "graph_nodes",
    "finite_difference_check",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "sqrt",
    "absolute",
    "huber",
    "softmax",
    "tsum",
    "tmean",
    "reshape",
    "transpose",
    "concatenate",
    "take",
    "scaled_dot_product_attention",
]

_GRAD_ENABLED = True
_KINK_TRACE = None


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def kink_trace():
    """Collect |input| minima of every relu/abs evaluated inside the block.

    Yields a list that receives one float per relu/abs call: the smallest
    absolute input value seen by that call. A finite-difference harness can
    inspect the list to detect configurations sitting on a kink.
    """
    global _KINK_TRACE
    prev = _KINK_TRACE
    _KINK_TRACE = []
    try:
        yield _KINK_TRACE
    finally:
        _KINK_TRACE = prev


def _record_kink(data):
    if _KINK_TRACE is not None and data.size:
        _KINK_TRACE.append(float(np.min(np.abs(data))))


class Tensor:
    """Dense float64 array plus optional autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

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

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- operator sugar -------------------------------------------------
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

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _constant(data):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    return out


def _recorded(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = True
    out._parents = parents
    out._backward = backward
    return out


def _accumulate(t, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    """Sum an upstream gradient down to `shape` (inverse of broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_data(a, b, op, opname):
    try:
        return op(a.data, b.data)
    except ValueError:
        raise ValueError(
            f"{opname}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None


# -- elementwise arithmetic ---------------------------------------------


def add(a, b):
    a, b = _lift(a), _lift(b)
    data = _binary_data(a, b, np.add, "add")
    if not (_GRAD_ENABLED and (a.requires_grad or b.requires_grad)):
        return _constant(data)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _recorded(data, (a, b), backward)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    data = _binary_data(a, b, np.subtract, "sub")
    if not (_GRAD_ENABLED and (a.requires_grad or b.requires_grad)):
        return _constant(data)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _recorded(data, (a, b), backward)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    data = _binary_data(a, b, np.multiply, "mul")
    if not (_GRAD_ENABLED and (a.requires_grad or b.requires_grad)):
        return _constant(data)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _recorded(data, (a, b), backward)


def div(a, b):
    a, b = _lift(a), _lift(b)
    data = _binary_data(a, b, np.divide, "div")
    if not (_GRAD_ENABLED and (a.requires_grad or b.requires_grad)):
        return _constant(data)

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _recorded(data, (a, b), backward)


def neg(a):
    a = _lift(a)
    data = -a.data
    if not (_GRAD_ENABLED and a.requires_grad):
        return _constant(data)

    def backward(g):
        _accumulate(a, -g)

    return _recorded(data, (a,), backward)


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    ad_, bd = a.data, b.data
    if ad_.ndim != 2 or bd.ndim != 2 or ad_.shape[1] != bd.shape[0]:
        raise ValueError(f"matmul: incompatible operands {ad_.shape} and {bd.shape}")
    data = ad_ @ bd
    if not (_GRAD_ENABLED and (a.requires_grad or b.requires_grad)):
        return _constant(data)

    def backward(g):
        _accumulate(a, g @ bd.T)
        _accumulate(b, ad_.T @ g)

    return _recorded(data, (a, b), backward)


# -- nonlinearities ------------------------------------------------------


def relu(a):
    a = _lift(a)
    _record_kink(a.data)
    data = np.maximum(a.data, 0.0)
    if not (_GRAD_ENABLED and a.requires_grad):
        return _constant(data)
    mask = a.data > 0.0  # subgradient 0 at the origin

    def backward(g):
        _accumulate(a, g * mask)

    return _recorded(data, (a,), backward)


def sigmoid(a):
    a = _lift(a)
    data = 1.0 / (1.0 + np.exp(-a.data))
    if not (_GRAD_ENABLED and a.requires_grad):
        return _constant(data)

    def backward(g):
        _accumulate(a, g * data * (1.0 - data))

    return _recorded(data, (a,), backward)


def exp(a):
    a = _lift(a)
    data = np.exp(a.data)
    if not (_GRAD_ENABLED and a.requires_grad):
        return _constant(data)

    def backward(g):
        _accumulate(a, g * data)

    return _recorded(data, (a,), backward)


def log(a):
    a = _lift(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log: input must be strictly positive")
    data = np.log(a.data)
    if not (_GRAD_ENABLED and a.requires_grad):
        return _constant(data)

    def backward(g):
        _accumulate(a, g / a.data)

    return _recorded(data, (a,), backward)


def sqrt(a):
    a = _lift(a)
    if np.any(a.data < 0.0):
        raise ValueError("sqrt: input must be nonnegative")
    data = np.sqrt(a.data)
    if not (_GRAD_ENABLED and a.requires_grad):
        return _constant(data)

    def backward(g):
        _accumulate(a, g * 0.5 / data)

    return _recorded(data, (a,), backward)


def absolute(a):
    """Elementwise |x|; the L1 residual building block."""
    a = _lift(a)
    _record_kink(a.data)
    data = np.abs(a.data)
    if not (_GRAD_ENABLED and a.requires_grad):
        return _constant(data)
    sign = np.sign(a.data)  # 0 at the origin

    def backward(g):
        _accumulate(a, g * sign)

    return _recorded(data, (a,), backward)


def huber(a, delta):
    """Elementwise Huber penalty of a residual: r^2/2 inside |r|<=delta,
    delta*(|r| - delta/2) outside. C1 everywhere."""
    a = _lift(a)
    delta = float(delta)
    if delta <= 0.0:
        raise ValueError("huber: delta must be positive")
    absr = np.abs(a.data)
    quad = absr <= delta
    data = np.where(quad, 0.5 * a.data * a.data, delta * (absr - 0.5 * delta))
    if not (_GRAD_ENABLED and a.requires_grad):
        return _constant(data)
    dgrad = np.clip(a.data, -delta, delta)

    def backward(g):
        _accumulate(a, g * dgrad)

    return _recorded(data, (a,), backward)


def softmax(a, axis=-1):
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)
    if not (_GRAD_ENABLED and a.requires_grad):
        return _constant(data)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accumulate(a, data * (g - inner))

    return _recorded(data, (a,), backward)


# -- reductions and shape ops --------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = _lift(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if not (_GRAD_ENABLED and a.requires_grad):
        return _constant(data)
    shape = a.data.shape

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        _accumulate(a, np.broadcast_to(gg, shape).copy())

    return _recorded(data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = _lift(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    if not (_GRAD_ENABLED and a.requires_grad):
        return _constant(data)
    shape = a.data.shape
    count = a.data.size if axis is None else shape[axis]
    inv = 1.0 / count

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g * inv, shape).copy())
            return
        gg = g * inv
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        _accumulate(a, np.broadcast_to(gg, shape).copy())

    return _recorded(data, (a,), backward)


def reshape(a, shape):
    a = _lift(a)
    data = a.data.reshape(shape)
    if not (_GRAD_ENABLED and a.requires_grad):
        return _constant(data)
    old = a.data.shape

    def backward(g):
        _accumulate(a, g.reshape(old))

    return _recorded(data, (a,), backward)


def transpose(a, axes=None):
    a = _lift(a)
    data = np.transpose(a.data, axes)
    if not (_GRAD_ENABLED and a.requires_grad):
        return _constant(data)
    inverse = None if axes is None else np.argsort(axes)

    def backward(g):
        _accumulate(a, np.transpose(g, inverse))

    return _recorded(data, (a,), backward)


def take(a, key):
    """Basic slicing/integer indexing with gradient scatter."""
    a = _lift(a)
    data = a.data[key]
    if not (_GRAD_ENABLED and a.requires_grad):
        return _constant(data)
    shape = a.data.shape

    def backward(g):
        z = np.zeros(shape)
        z[key] = g
        _accumulate(a, z)

    return _recorded(data, (a,), backward)


def concatenate(tensors, axis=0):
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise ValueError("concatenate: need at least one tensor")
    data = np.concatenate([t.data for t in ts], axis=axis)
    if not (_GRAD_ENABLED and any(t.requires_grad for t in ts)):
        return _constant(data)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return _recorded(data, tuple(ts), backward)


def scaled_dot_product_attention(q, k, v):
    """softmax(q kᵀ / sqrt(d)) v for 2-D (tokens × dim) operands."""
    q, k, v = _lift(q), _lift(k), _lift(v)
    d = q.data.shape[-1]
    scores = mul(matmul(q, transpose(k)), 1.0 / np.sqrt(d))
    return matmul(softmax(scores, axis=-1), v)


# -- backward pass --------------------------------------------------------


def graph_nodes(root):
    """All tensors reachable from `root` through recorded parents, in
    topological order (parents before children)."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def gradient_of(loss, params):
    """Gradients of a scalar loss with respect to each tensor in `params`.

    Returns a dict keyed by the parameter objects; parameters the loss does
    not depend on map to zero arrays of matching shape. Grad state left on
    the graph is cleared before returning, so repeated calls never mix.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"gradient_of: loss must be scalar, got shape {loss.data.shape}")
    params = list(params)
    order = graph_nodes(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    out = {}
    for p in params:
        if p.grad is not None:
            out[p] = np.array(p.grad, dtype=np.float64)
        else:
            out[p] = np.zeros(p.data.shape, dtype=np.float64)
    for node in order:
        node.grad = None
    return out


def finite_difference_check(fn, x, step=1e-5):
    """Max relative discrepancy between analytic and central-difference
    gradients of scalar-valued `fn` at `x`.

    Relative error per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    if step <= 0.0:
        raise ValueError("finite_difference_check: step must be positive")
    base = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    analytic = gradient_of(fn(xt), [xt])[xt]
    numeric = np.zeros_like(base)
    flat = base.ravel()
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            idx = np.unravel_index(i, base.shape)
            plus = base.copy()
            plus[idx] = orig + step
            minus = base.copy()
            minus[idx] = orig - step
            fp = float(fn(Tensor(plus)).data)
            fm = float(fn(Tensor(minus)).data)
            numeric[idx] = (fp - fm) / (2.0 * step)
    denom = np.maximum(1.0, np.abs(analytic))
    if base.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))
