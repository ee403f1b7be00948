"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray together with an optional gradient buffer and a
backward closure. Building a forward expression records a tape; calling
``backward()`` on a scalar result walks the tape in reverse topological
order and accumulates gradients into every tensor with ``requires_grad``.

Training runs in float32, gradient verification in float64; ops never
promote the operand dtype. Broadcasting follows numpy semantics and is
reversed in the backward pass by summing over broadcast axes.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy import special as _special

from slicegate.errors import NumericError

_grad_enabled = True
_finite_checks = False

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def finite_checks(enabled: bool = True):
    """Check every op output for NaN/Inf inside the block (slow; tests)."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = enabled
    try:
        yield
    finally:
        _finite_checks = prev


class Tensor:
    """An ndarray with an optional grad buffer and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def item(self):
        return float(self.data)

    def require_finite(self, context=""):
        """Raise NumericError if any value is NaN/Inf."""
        if not np.isfinite(self.data).all():
            where = f" in {context}" if context else ""
            raise NumericError(f"non-finite values{where}"
                               f" (tensor {self.name or '<unnamed>'})")
        return self

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable grad buffer."""
        if grad is None:
            grad = np.ones_like(self.data)
        topo = _topo_order(self)
        _accumulate(self, grad)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
                if _finite_checks:
                    for p in node._parents:
                        if p.grad is not None and not np.isfinite(p.grad).all():
                            raise NumericError("non-finite gradient in backward pass")
                node._backward = None
                node._parents = ()

    # Operator sugar; scalars are accepted wherever shapes broadcast.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def _topo_order(root):
    """Iterative post-order over the tape (graphs exceed recursion limits)."""
    topo, visited, stack = [], set(), [(root, False)]
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
    return topo


def _accumulate(t, g, owned=False):
    """Add g into t's grad buffer.

    owned=True promises g is a fresh array (or a view of one) private to
    this edge, so the first accumulation may adopt it without copying.
    Arrays aliasing a consumer's grad buffer must pass owned=False unless
    the caller can prove no other edge adopts the same buffer.
    """
    if t.grad is None:
        if owned and g.shape == t.data.shape:
            t.grad = g
        else:
            t.grad = np.array(np.broadcast_to(g, t.data.shape), dtype=t.data.dtype)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _result(data, parents, backward):
    if _finite_checks and not np.isfinite(data).all():
        raise NumericError("non-finite values in forward pass")
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = parents
        out._backward = backward
    return out


def as_tensor(value, like=None):
    """Wrap a constant; matches `like`'s dtype when given."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def add(a, b):
    if not isinstance(b, Tensor):
        out_data = a.data + b
        parents = (a,)

        def backward():
            if a.requires_grad:
                _accumulate(a, _unbroadcast(out.grad, a.data.shape), owned=True)

        out = _result(out_data, parents, backward)
        return out
    out_data = a.data + b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            ga = _unbroadcast(g, a.data.shape)
            _accumulate(a, ga, owned=ga is not g)
        if b.requires_grad:
            # a never adopts g itself, so this edge may
            _accumulate(b, _unbroadcast(g, b.data.shape), owned=True)

    out = _result(out_data, (a, b), backward)
    return out


def mul(a, b):
    if not isinstance(b, Tensor):
        out_data = a.data * b

        def backward():
            if a.requires_grad:
                _accumulate(a, _unbroadcast(out.grad * b, a.data.shape), owned=True)

        out = _result(out_data, (a,), backward)
        return out
    out_data = a.data * b.data

    def backward():
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad * b.data, a.data.shape), owned=True)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(out.grad * a.data, b.data.shape), owned=True)

    out = _result(out_data, (a, b), backward)
    return out


def div(a, b):
    out_data = a.data / b.data

    def backward():
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad / b.data, a.data.shape), owned=True)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.data.shape),
                        owned=True)

    out = _result(out_data, (a, b), backward)
    return out


def power(a, exponent):
    out_data = a.data ** exponent

    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad * exponent * a.data ** (exponent - 1), owned=True)

    out = _result(out_data, (a,), backward)
    return out


def matmul(a, b):
    """a @ b with numpy batch broadcasting; operands must be >= 2-D.

    The common (..., M, K) @ (K, N) weight case folds the batch axes into
    one GEMM in both directions, avoiding a batched gradient intermediate
    that would then be summed.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise NumericError("matmul operands must have ndim >= 2")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        k = ad.shape[-1]
        a2 = ad.reshape(-1, k)
        out_data = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def backward():
            g2 = out.grad.reshape(-1, bd.shape[1])
            if a.requires_grad:
                _accumulate(a, (g2 @ bd.T).reshape(ad.shape), owned=True)
            if b.requires_grad:
                _accumulate(b, a2.T @ g2, owned=True)

        out = _result(out_data, (a, b), backward)
        return out
    out_data = np.matmul(ad, bd)

    def backward():
        g = out.grad
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
            _accumulate(a, _unbroadcast(ga, ad.shape), owned=True)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
            _accumulate(b, _unbroadcast(gb, bd.shape), owned=True)

    out = _result(out_data, (a, b), backward)
    return out


def exp(a):
    out_data = np.exp(a.data)

    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad * out_data, owned=True)

    out = _result(out_data, (a,), backward)
    return out


def log(a):
    out_data = np.log(a.data)

    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad / a.data, owned=True)

    out = _result(out_data, (a,), backward)
    return out


def sqrt(a):
    out_data = np.sqrt(a.data)

    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad * (0.5 / out_data), owned=True)

    out = _result(out_data, (a,), backward)
    return out


def sigmoid(a):
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad * out_data * (1.0 - out_data), owned=True)

    out = _result(out_data, (a,), backward)
    return out


def gelu(a):
    """Exact Gaussian-CDF form: x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + _special.erf(x * _INV_SQRT2))
    out_data = x * cdf

    def backward():
        if a.requires_grad:
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
            _accumulate(a, out.grad * (cdf + x * pdf), owned=True)

    out = _result(out_data, (a,), backward)
    return out


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward():
        if a.requires_grad:
            g = out.grad
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            _accumulate(a, out_data * (g - dot), owned=True)

    out = _result(out_data, (a,), backward)
    return out


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize to zero mean / unit variance over the last axis, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def backward():
        g = out.grad
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv * (dxhat - m1 - xhat * m2), owned=True)
        reduce_axes = tuple(range(out_data.ndim - 1))
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).sum(axis=reduce_axes), owned=True)
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=reduce_axes), owned=True)

    out = _result(out_data, (x, gain, bias), backward)
    return out


def bce_with_logits(logits, target):
    """Mean binary cross-entropy in the overflow-free log-sum-exp form."""
    x = logits.data
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=x.dtype)
    per_elem = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out_data = np.asarray(per_elem.mean(), dtype=x.dtype)

    def backward():
        if logits.requires_grad:
            p = np.empty_like(x)
            pos = x >= 0
            p[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
            ex = np.exp(x[~pos])
            p[~pos] = ex / (1.0 + ex)
            _accumulate(logits, out.grad * (p - t) / x.size, owned=True)

    out = _result(out_data, (logits,), backward)
    return out


def reduce_sum(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward():
        if a.requires_grad:
            g = out.grad
            if axis is not None and not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                g = np.expand_dims(g, axes)
            _accumulate(a, np.broadcast_to(g, a.data.shape))

    out = _result(np.asarray(out_data), (a,), backward)
    return out


def reduce_mean(a, axis=None, keepdims=False):
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def backward():
        if a.requires_grad:
            g = out.grad
            if axis is not None and not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                g = np.expand_dims(g, axes)
            _accumulate(a, np.broadcast_to(g, a.data.shape) / count, owned=True)

    out = _result(np.asarray(out_data), (a,), backward)
    return out


def reshape(a, shape):
    out_data = a.data.reshape(shape)

    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad.reshape(a.data.shape), owned=True)

    out = _result(out_data, (a,), backward)
    return out


def transpose(a, axes):
    axes = tuple(axes)
    out_data = np.transpose(a.data, axes)
    inverse = np.argsort(axes)

    def backward():
        if a.requires_grad:
            _accumulate(a, np.transpose(out.grad, inverse), owned=True)

    out = _result(out_data, (a,), backward)
    return out


def getitem(a, idx):
    """Basic indexing only (ints, slices, Ellipsis); views are copied."""
    out_data = np.ascontiguousarray(a.data[idx])

    def backward():
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[idx] += out.grad

    out = _result(out_data, (a,), backward)
    return out


def stack(tensors, axis=0):
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward():
        for i, t in enumerate(tensors):
            if t.requires_grad:
                _accumulate(t, np.take(out.grad, i, axis=axis), owned=True)

    out = _result(out_data, tuple(tensors), backward)
    return out


def embedding_rows(table, indices):
    """Gather rows `table[indices]`; backward scatter-adds into the table."""
    idx = np.asarray(indices)
    out_data = table.data[idx]

    def backward():
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, idx, out.grad)

    out = _result(out_data, (table,), backward)
    return out
