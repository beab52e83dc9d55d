"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps an ndarray and records the closure that propagates gradients
to its parents; backward() walks the recorded graph once in reverse
topological order and accumulates gradients additively.  One graph episode is
single-threaded; independent graphs may run in parallel threads.
"""

from __future__ import annotations

import numpy as np


class NonFiniteError(RuntimeError):
    """Raised when finite checks are enabled and an op produces inf/nan."""


_check_finite = False


class finite_checks:
    """Context manager enabling per-op finiteness diagnostics."""

    def __enter__(self):
        global _check_finite
        self._prev = _check_finite
        _check_finite = True
        return self

    def __exit__(self, *exc):
        global _check_finite
        _check_finite = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_backward", "_parents")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._backward = None
        self._parents = ()

    # -- basic protocol ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- graph -------------------------------------------------------------

    def backward(self):
        """Populate .grad of every requires_grad tensor reachable from self.

        Gradients accumulate additively across calls: running backward twice
        without zeroing doubles every gradient.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.data.shape}")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        # grads already present belong to earlier episodes; set them aside so
        # this episode propagates only its own messages, then merge back
        stash = [(n, n.grad) for n in topo if n.grad is not None]
        for n, _ in stash:
            n.grad = None
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for n, old in stash:
            n.grad = old if n.grad is None else n.grad + old

    # -- operators ----------------------------------------------------------

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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    if _check_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward, "div")


def power(a, exponent):
    a = as_tensor(a)
    if not np.isscalar(exponent):
        raise ValueError("power only supports scalar exponents")
    data = a.data**exponent

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * exponent * a.data ** (exponent - 1))

    return _make(data, (a,), backward, "power")


def exp(a):
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * data)

    return _make(data, (a,), backward, "exp")


def log(a):
    a = as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(data, (a,), backward, "log")


def sqrt(a):
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / data)

    return _make(data, (a,), backward, "sqrt")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    data = np.where(mask, a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _make(data, (a,), backward, "relu")


def sigmoid(a):
    a = as_tensor(a)
    data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * data * (1.0 - data))

    return _make(data, (a,), backward, "sigmoid")


def tanh(a):
    a = as_tensor(a)
    data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - data * data))

    return _make(data, (a,), backward, "tanh")


def softmax(a):
    """Softmax over the last axis; rows are positive and sum to 1."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            inner = (g * data).sum(axis=-1, keepdims=True)
            a._accumulate(data * (g - inner))

    return _make(data, (a,), backward, "softmax")


# ---------------------------------------------------------------------------
# shape / structure
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2D operands, got {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(data, (a, b), backward, "matmul")


def reshape(a, *shape):
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return _make(data, (a,), backward, "reshape")


def transpose(a, *axes):
    a = as_tensor(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    axes = axes or tuple(reversed(range(a.ndim)))
    data = a.data.transpose(axes)
    inverse = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inverse))

    return _make(data, (a,), backward, "transpose")


def _key_has_arrays(key):
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(p, (np.ndarray, list)) for p in parts)


def getitem(a, key):
    a = as_tensor(a)
    data = a.data[key]
    fancy = _key_has_arrays(key)  # repeated indices must accumulate

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            if fancy:
                np.add.at(full, key, g)
            else:
                full[key] += g
            a._accumulate(full)

    return _make(data, (a,), backward, "slice")


def concatenate(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(data, tuple(tensors), backward, "concatenate")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return _make(data, tuple(tensors), backward, "stack")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _make(data, (a,), backward, "sum")


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        count = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def tmax(a, axis):
    """Max over one axis; backward routes gradient to the (first) argmax."""
    a = as_tensor(a)
    data = a.data.max(axis=axis)
    arg = a.data.argmax(axis=axis)

    def backward(g):
        if not a.requires_grad:
            return
        full = np.zeros_like(a.data)
        idx = list(np.indices(data.shape))
        idx.insert(axis % a.ndim, arg)
        np.add.at(full, tuple(idx), g)
        a._accumulate(full)

    return _make(data, (a,), backward, "max")


def squared_difference(a, b):
    """Mean of elementwise squared differences (the MSE reduction)."""
    a, b = as_tensor(a), as_tensor(b)
    diff = a.data - b.data
    n = diff.size
    data = np.array((diff * diff).sum() / n)

    def backward(g):
        scale = 2.0 * float(g) / n
        if a.requires_grad:
            a._accumulate(scale * diff)
        if b.requires_grad:
            b._accumulate(-scale * diff)

    return _make(data, (a, b), backward, "squared_difference")


def l2norm(a, axis=-1, eps=0.0):
    """Euclidean norm reduction along an axis: sqrt(sum(a^2) + eps)."""
    a = as_tensor(a)
    sq = (a.data * a.data).sum(axis=axis) + eps
    data = np.sqrt(sq)

    def backward(g):
        if a.requires_grad:
            denom = np.expand_dims(np.maximum(data, 1e-300), axis)
            a._accumulate(np.expand_dims(g, axis) * a.data / denom)

    return _make(data, (a,), backward, "l2norm")


def dropout(a, p, rng, training=True):
    """Inverted dropout: retained activations scaled by 1/(1-p) at train time."""
    a = as_tensor(a)
    if not training or p <= 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    mask = (rng.random(a.data.shape) >= p) / (1.0 - p)
    data = a.data * mask

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _make(data, (a,), backward, "dropout")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

class GradCheckReport:
    def __init__(self):
        self.max_rel_error = 0.0
        self.per_input = []
        self.tol = None

    @property
    def passed(self):
        return self.max_rel_error < self.tol

    def __repr__(self):
        lines = [f"gradcheck: max rel error {self.max_rel_error:.3e} (tol {self.tol:.1e})"]
        for name, err in self.per_input:
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def _rel_error(analytic, numeric):
    scale = max(abs(analytic), abs(numeric))
    diff = abs(analytic - numeric)
    return diff if scale < 1e-6 else diff / scale


def gradcheck(f, inputs, h=1e-5, tol=1e-4):
    """Compare analytic gradients of scalar f(*inputs) with central differences.

    Every input must be a requires_grad Tensor; f must be deterministic.
    Returns a report with the max relative error per input.
    """
    inputs = list(inputs)
    for t in inputs:
        if not isinstance(t, Tensor) or not t.requires_grad:
            raise ValueError("gradcheck inputs must be requires_grad Tensors")
        t.zero_grad()
        if not np.all(np.isfinite(t.data)):
            raise ValueError("gradcheck inputs must be finite")

    with finite_checks():
        loss = f(*inputs)
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ValueError("gradcheck requires a scalar-valued function")
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    report = GradCheckReport()
    report.tol = tol
    for i, t in enumerate(inputs):
        worst = 0.0
        flat = t.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            hi = f(*inputs).item()
            flat[k] = orig - h
            lo = f(*inputs).item()
            flat[k] = orig
            numeric = (hi - lo) / (2.0 * h)
            worst = max(worst, _rel_error(analytic[i].reshape(-1)[k], numeric))
        name = t.name or f"input[{i}]"
        report.per_input.append((name, worst))
        report.max_rel_error = max(report.max_rel_error, worst)
        t.grad = analytic[i]
    return report
