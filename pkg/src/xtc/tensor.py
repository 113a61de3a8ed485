"""Dense tensors with reverse-mode automatic differentiation.

A deliberately small engine: every op computes its forward value with numpy
and, when any input requires a gradient, records a closure that maps the
output gradient to input gradients.  ``Tensor.backward`` replays those
closures in reverse topological order, accumulating into ``.grad``.

Values are float32 unless a different default dtype is selected with
:func:`default_dtype` (gradient checks use float64 so that finite
differences are not swamped by rounding).
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import DimensionError

_GRAD_ENABLED = True
_DTYPE = np.float32


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def default_dtype(dtype):
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


def get_default_dtype():
    return _DTYPE


class Tensor:
    """An n-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable tensor's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self.grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            in_grads = node._backward(node.grad)
            for parent, g in zip(node._parents, in_grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.asarray(g, dtype=parent.data.dtype)
                else:
                    parent.grad = parent.grad + g

    # -- operator sugar -----------------------------------------------------
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
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` over broadcast leading / unit axes."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b, opname):
    # only leading batch axes may broadcast; trailing dims must match exactly
    sa, sb = a.shape, b.shape
    n = min(len(sa), len(sb))
    if n and sa[len(sa) - n:] != sb[len(sb) - n:]:
        # allow scalar-like size-1 tensors
        if a.size != 1 and b.size != 1:
            raise DimensionError(f"{opname}: shapes {sa} and {sb} differ beyond the leading axes")


# -- elementwise ------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b):
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        c = b
        a = as_tensor(a)
        return _result(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)

    return _result(a.data * b.data, (a, b), backward)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """GeLU, tanh approximation."""
    x = as_tensor(x)
    v = x.data
    v2 = v * v
    t = v2 * 0.044715
    t += 1.0
    t *= v
    t *= _GELU_C
    np.tanh(t, out=t)
    out = t + 1.0
    out *= v
    out *= 0.5

    def backward(g):
        # d/dv = 0.5 (1 + t) + 0.5 v (1 - t^2) c (1 + 3a v^2)
        d = t * t
        np.subtract(1.0, d, out=d)
        d *= v
        d *= (v2 * (3 * 0.044715 * _GELU_C) + _GELU_C)
        d += t
        d += 1.0
        d *= 0.5
        d *= g
        return (d,)

    return _result(out, (x,), backward)


def activation(x, kind):
    if kind == "gelu":
        return gelu(x)
    if kind == "relu":
        return relu(x)
    raise ValueError(f"unknown activation {kind!r}")


# -- shape ops --------------------------------------------------------------

def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=()):
    x = as_tensor(x)
    if not axes:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


# -- reductions -------------------------------------------------------------

def sum_(x, axis=None):
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(x.data.sum(axis=axis)), (x,), backward)


def mean(x, axis=None):
    x = as_tensor(x)
    shape = x.shape
    n = x.size if axis is None else np.prod([shape[a] for a in np.atleast_1d(axis)])
    scale = 1.0 / n

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * scale, shape),)

    return _result(np.asarray(x.data.mean(axis=axis)), (x,), backward)


# -- linear algebra ---------------------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes; leading axes are batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    sa, sb = a.shape, b.shape
    flat = a.ndim > 2 and b.ndim == 2
    if flat:
        # one 2-D GEMM is much faster than numpy's stacked matmul loop
        out = (a.data.reshape(-1, sa[-1]) @ b.data).reshape(sa[:-1] + (sb[-1],))
    else:
        out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(sa)
            if b.requires_grad:
                gb = a.data.reshape(-1, sa[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), sa)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, sb)
        return ga, gb

    return _result(out, (a, b), backward)


def linear(x, w, bias=None):
    y = matmul(x, w)
    return y if bias is None else add(y, bias)


def embedding(table, ids):
    """Row lookup ``table[ids]`` with scatter-add backward."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    shape = table.shape

    def backward(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (gt,)

    return _result(table.data[ids], (table,), backward)


# -- normalisation ----------------------------------------------------------

def softmax(x, axis=-1):
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward)


def log_softmax_array(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def layernorm(x, gain, bias, eps=1e-5):
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("layernorm over an empty axis")
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DimensionError(f"layernorm affine params must have shape {x.shape[-1:]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out.astype(x.data.dtype, copy=False), (x, gain, bias), backward)


def dropout(x, rate, rng):
    if rate <= 0.0:
        return x
    x = as_tensor(x)
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(x.data.dtype)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# -- losses -----------------------------------------------------------------

def mse(a, b):
    """Mean squared error over all entries."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    scale = 2.0 / max(diff.size, 1)

    def backward(g):
        d = g * scale * diff
        return d, -d

    return _result(np.asarray((diff * diff).mean(), dtype=a.data.dtype), (a, b), backward)


def soft_cross_entropy(student_logits, teacher_logits):
    """Mean over rows of ``-sum softmax(teacher) * log_softmax(student)``."""
    s, t = as_tensor(student_logits), as_tensor(teacher_logits)
    if s.shape != t.shape:
        raise DimensionError(f"soft_cross_entropy: shapes {s.shape} and {t.shape} differ")
    if s.ndim == 0 or s.shape[-1] == 0:
        raise DimensionError("soft_cross_entropy needs a non-empty class axis")
    log_q = log_softmax_array(s.data)
    log_p = log_softmax_array(t.data)
    p = np.exp(log_p)
    rows = max(s.size // s.shape[-1], 1)
    value = -(p * log_q).sum() / rows

    def backward(g):
        gs = g * (np.exp(log_q) - p) / rows
        weighted = (p * log_q).sum(axis=-1, keepdims=True)
        gt = -g * p * (log_q - weighted) / rows
        return gs, gt

    return _result(np.asarray(value, dtype=s.data.dtype), (s, t), backward)


def cross_entropy(logits, labels):
    """Mean hard-label cross entropy; ``labels`` are integer class ids."""
    x = as_tensor(logits)
    labels = np.asarray(labels)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise DimensionError(f"cross_entropy: logits {x.shape} vs labels {labels.shape}")
    log_q = log_softmax_array(x.data)
    n = x.shape[0]
    rows = np.arange(n)
    value = -log_q[rows, labels].mean()

    def backward(g):
        d = np.exp(log_q)
        d[rows, labels] -= 1.0
        return (g * d / n,)

    return _result(np.asarray(value, dtype=x.data.dtype), (x,), backward)


# -- custom gradients -------------------------------------------------------

def custom_grad(forward_fn, backward_override):
    """Wrap ``forward_fn`` (on arrays) with a hand-written backward rule.

    ``backward_override(grad_out, *inputs)`` receives the output gradient and
    the saved input arrays and must return one gradient per input.  This is
    how straight-through estimators are expressed: the forward may be
    piecewise constant while the backward pretends it is the identity.
    """

    def op(*tensors):
        tensors = tuple(as_tensor(t) for t in tensors)
        arrays = tuple(t.data for t in tensors)
        out = np.asarray(forward_fn(*arrays))
        if out.dtype != arrays[0].dtype:
            out = out.astype(arrays[0].dtype)

        def backward(g):
            grads = backward_override(g, *arrays)
            if not isinstance(grads, (tuple, list)):
                grads = (grads,)
            return tuple(grads)

        return _result(out, tensors, backward)

    return op


def straight_through(forward_fn, clip=None):
    """STE: forward through ``forward_fn``, backward as identity (optionally clipped)."""
    if clip is None:
        return custom_grad(forward_fn, lambda g, w: (g,))
    return custom_grad(forward_fn, lambda g, w: (g * (np.abs(w) <= clip),))


def numerical_grad(fn, x, eps=1e-3):
    """Central finite differences of scalar ``fn(array)`` with respect to ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(x)
        flat[i] = orig - eps
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g
