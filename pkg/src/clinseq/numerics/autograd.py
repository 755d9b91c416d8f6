"""Dense float64 tensors with tape-free reverse-mode autodiff.

Each op records its parents and a closure that pushes ``out.grad`` back to
them. ``Tensor.backward`` walks the graph in reverse topological order.
Broadcasting is limited to what numpy does for elementwise ops; gradients are
summed back to the operand shape.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    pass


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
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
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                if node.requires_grad:
                    node._accum(g)
                continue
            for parent, pg in node._backward(g):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        return (
            (a, _unbroadcast(g * b.data, a.shape) if a.requires_grad else None),
            (b, _unbroadcast(g * a.data, b.shape) if b.requires_grad else None),
        )

    return _make(a.data * b.data, (a, b), bw)


def exp(a):
    out_data = np.exp(a.data)

    def bw(g):
        return ((a, g * out_data),)

    return _make(out_data, (a,), bw)


def log(a):
    def bw(g):
        return ((a, g / a.data),)

    return _make(np.log(a.data), (a,), bw)


def tabs(a):
    def bw(g):
        return ((a, g * np.sign(a.data)),)

    return _make(np.abs(a.data), (a,), bw)


def square(a):
    def bw(g):
        return ((a, 2.0 * g * a.data),)

    return _make(a.data * a.data, (a,), bw)


def sigmoid(a):
    s = _sigmoid(a.data)

    def bw(g):
        return ((a, g * s * (1.0 - s)),)

    return _make(s, (a,), bw)


def softplus(a):
    """log(1 + e^x), stable for large |x|."""

    def bw(g):
        return ((a, g * _sigmoid(a.data)),)

    return _make(np.logaddexp(0.0, a.data), (a,), bw)


def relu(a):
    def bw(g):
        return ((a, g * (a.data > 0)),)

    return _make(np.maximum(a.data, 0.0), (a,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    # tanh approximation, as in GPT-2; in-place temporaries keep this cheap
    x = a.data
    x2 = x * x
    t = x2 * 0.044715
    t += 1.0
    t *= x
    t *= _GELU_C
    np.tanh(t, out=t)
    out = t + 1.0
    out *= x
    out *= 0.5

    def bw(g):
        d = x2 * (3 * 0.044715)
        d += 1.0
        d *= _GELU_C * 0.5
        d *= x
        d *= 1.0 - t * t
        d += 0.5 * (1.0 + t)
        d *= g
        return ((a, d),)

    return _make(out, (a,), bw)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------- reductions / shape


def tsum(a, axis=None, keepdims=False):
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.shape)),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None

    def bw(g):
        return ((a, g.reshape(a.shape)),)

    return _make(out, (a,), bw)


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)

    def bw(g):
        return ((a, g.transpose(inv)),)

    return _make(a.data.transpose(axes), (a,), bw)


def take(a, idx):
    """Basic or advanced indexing; the gradient scatters back with add.at."""

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return ((a, full),)

    return _make(a.data[idx], (a,), bw)


def embedding(table, ids):
    """Row gather ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")

    def bw(g):
        flat = g.reshape(-1, table.shape[1])
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), flat)
        return ((table, full),)

    return _make(table.data[ids], (table,), bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError:
        shapes = " and ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat along axis {axis}: shapes {shapes} do not conform") from None
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def bw(g):
        parts = np.split(g, sizes, axis=axis)
        return tuple(zip(tensors, parts))

    return _make(out, tensors, bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ((a, ga), (b, gb))

    return _make(out, (a, b), bw)


def linear(x, weight, bias=None):
    """x @ weight (+ bias) over the last axis of ``x``; weight is (in, out).

    Leading axes are flattened into one GEMM rather than broadcast.
    """
    x = as_tensor(x)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} and weight {weight.shape} are not aligned")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, weight.shape[0])
    out = x2 @ weight.data
    if bias is not None:
        out += bias.data
    out = out.reshape(lead + (weight.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        res = [(x, gx), (weight, gw)]
        if bias is not None:
            res.append((bias, g2.sum(axis=0)))
        return res

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


# ---------------------------------------------------------------- normalisation


def softmax(a, axis=-1):
    x = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(x)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return ((a, p * (g - (g * p).sum(axis=axis, keepdims=True))),)

    return _make(p, (a,), bw)


def log_softmax(a, axis=-1):
    m = np.max(a.data, axis=axis, keepdims=True)
    x = a.data - m
    lse = np.log(np.exp(x).sum(axis=axis, keepdims=True))
    out = x - lse

    def bw(g):
        p = np.exp(out)
        return ((a, g - p * g.sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalise over the last axis, then apply the learned affine map."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm: input {x.shape} needs gain/bias of shape ({x.shape[-1]},), "
            f"got {gain.shape} and {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def bw(g):
        n = x.shape[-1]
        gx = gg = gb = None
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, n).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, n).sum(axis=0)
        if x.requires_grad:
            gh = g * gain.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return ((x, gx), (gain, gg), (bias, gb))

    return _make(out, (x, gain, bias), bw)


def attention_bias_add(scores, bias):
    """Add a constant (possibly -inf) bias before softmax; no gradient to the bias."""
    bias = np.asarray(bias, dtype=np.float64)
    _check_broadcast("attention bias", scores, Tensor(bias))

    def bw(g):
        return ((scores, g),)

    return _make(scores.data + bias, (scores,), bw)
