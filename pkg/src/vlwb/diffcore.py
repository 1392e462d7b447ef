"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and
a closure mapping the upstream gradient to per-parent gradients.  The graph is
rebuilt on every forward pass; :func:`backward` walks it in reverse
topological order.

Only the operator set needed by the encoders and attack losses is provided.
Binary ops accept equal shapes, a 0-d operand, or an operand whose shape equals
the trailing axes of the other (bias rows, position tables); anything else is a
:class:`ShapeError`.
"""

import builtins
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, *, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op):
    needs = any(p.requires_grad for p in parents)
    return Tensor(
        data,
        requires_grad=needs,
        _parents=tuple(parents) if needs else (),
        _backward=backward if needs else None,
        op=op,
    )


def _check_binary(op, a, b):
    sa, sb = a.shape, b.shape
    if sa == sb or a.ndim == 0 or b.ndim == 0:
        return
    if 0 < b.ndim < a.ndim and sa[-b.ndim:] == sb:
        return
    if 0 < a.ndim < b.ndim and sb[-a.ndim:] == sa:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.sum(g)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


# -- elementwise --------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw, "mul")


def scale(x, c):
    """Multiply by a Python scalar constant."""
    x = as_tensor(x)
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x):
    x = as_tensor(x)
    # subgradient at exactly 0 is 0
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def clamp_min(x, floor):
    """max(x, floor) elementwise for a constant floor; gradient 0 where clamped."""
    x = as_tensor(x)
    mask = x.data > floor
    return _result(np.where(mask, x.data, floor), (x,), lambda g: (g * mask,), "clamp_min")


# -- reductions ---------------------------------------------------------------

def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.sum(x.data, axis=axis), (x,), bw, "sum")


def mean(x, axis=None):
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis), 1.0 / n)


def max(x, axis=-1):  # noqa: A001
    """Maximum along one axis; the gradient goes to the first arg-max."""
    x = as_tensor(x)
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _result(out, (x,), bw, "max")


def sq_l2_norm(x):
    x = as_tensor(x)
    return _result(np.sum(x.data * x.data), (x,), lambda g: (2.0 * g * x.data,), "sq_l2_norm")


# -- shape / linear algebra ---------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.data.T, a.data.T @ g
        if a.ndim == 1 and b.ndim == 2:
            return b.data @ g, np.outer(a.data, g)
        if a.ndim == 2:
            return np.outer(g, b.data), a.data.T @ g
        return g * b.data, g * a.data

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _result(out, (x,), lambda g: (g.reshape(old),), "reshape")


def permute(x, axes):
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "permute")


def transpose(x):
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {x.shape}")
    return permute(x, (1, 0))


def take(x, index):
    """Select ``x[..., index]`` along the last axis."""
    x = as_tensor(x)

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[..., index] = g
        return (gx,)

    return _result(x.data[..., index], (x,), bw, "take")


# -- composite ----------------------------------------------------------------

def l2_normalize(x, eps=1e-12):
    x = as_tensor(x)
    norm = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x.data / norm

    def bw(g):
        return ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / norm,)

    return _result(y, (x,), bw, "l2_normalize")


def cosine_sim(u, v):
    """Cosine similarity along the last axis (inputs need not be unit length)."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape:
        raise ShapeError(f"cosine_sim: incompatible shapes {u.shape} and {v.shape}")
    return sum(mul(l2_normalize(u), l2_normalize(v)), axis=-1)


def log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    m = np.max(z, axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.sum(np.exp(s), axis=-1, keepdims=True))


def softmax(z):
    return np.exp(log_softmax(z))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of softmax(logits) against integer labels.

    ``logits`` is ``(K,)`` with a scalar label or ``(B, K)`` with ``B`` labels.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim == 1:
        if labels.ndim != 0:
            raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} need a scalar label")
        rows = logits.data[None, :]
        lab = labels[None]
    elif logits.ndim == 2 and labels.shape == (logits.shape[0],):
        rows = logits.data
        lab = labels
    else:
        raise ShapeError(
            f"softmax_cross_entropy: incompatible shapes {logits.shape} and labels {labels.shape}"
        )
    k = rows.shape[1]
    if np.any(lab < 0) or np.any(lab >= k):
        raise ValueError(f"softmax_cross_entropy: label out of range for {k} classes")
    n = rows.shape[0]
    lsm = log_softmax(rows)
    loss = -np.mean(lsm[np.arange(n), lab])

    def bw(g):
        p = np.exp(lsm)
        p[np.arange(n), lab] -= 1.0
        p *= g / n
        return (p.reshape(logits.shape),)

    return _result(loss, (logits,), bw, "softmax_cross_entropy")


# -- backward -----------------------------------------------------------------

def _topological(root):
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root):
    """Back-propagate from a scalar ``root``.

    Returns a dict mapping each ``requires_grad`` leaf to its gradient array;
    the same arrays are stored on the leaves' ``grad`` attribute.
    """
    if root.data.size != 1 or root.ndim != 0:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    grads = {id(root): np.ones((), dtype=np.float64)}
    out = {}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = np.array(g, dtype=np.float64).reshape(node.shape)
                out[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return out


def grad(fn, x):
    """Value and gradient of scalar ``fn(x)`` with respect to array ``x``."""
    leaf = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    y = fn(leaf)
    backward(y)
    g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    return y.item(), g


# -- gradient check -----------------------------------------------------------

@dataclass
class GradCheck:
    max_error: float
    errors: np.ndarray
    nondifferentiable: list = field(default_factory=list)
    nonfinite: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.nonfinite


def grad_check(builder, x, h=1e-5, coords=None, kink_tol=1e-2):
    """Compare the analytic gradient of ``builder`` with central differences.

    The error per probed coordinate is ``|analytic - central| / max(1, |analytic|)``.
    Coordinates whose one-sided differences disagree by more than ``kink_tol``
    (relative) sit on a kink such as relu at 0; they are reported and excluded.
    """
    if not 0.0 < h <= 1e-3:
        raise ValueError(f"grad_check: step h={h} outside (0, 1e-3]")
    x = np.array(as_tensor(x).data, dtype=np.float64)
    _, analytic = grad(builder, x)
    flat = x.reshape(-1)
    analytic = analytic.reshape(-1)
    probe = np.arange(flat.size) if coords is None else np.asarray(coords).reshape(-1)

    def f(v):
        return float(builder(Tensor(v.reshape(x.shape))).data)

    f0 = f(flat)
    errors = np.zeros(probe.size)
    kinks, bad = [], []
    for n, i in enumerate(probe):
        v = flat.copy()
        v[i] = flat[i] + h
        fp = f(v)
        v[i] = flat[i] - h
        fm = f(v)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            bad.append(int(i))
            errors[n] = np.nan
            continue
        fwd, bwd = (fp - f0) / h, (f0 - fm) / h
        scale_ = builtins.max(1.0, abs(analytic[i]))
        if abs(fwd - bwd) > kink_tol * scale_:
            kinks.append(int(i))
            errors[n] = np.nan
            continue
        errors[n] = abs(analytic[i] - (fp - fm) / (2 * h)) / scale_
    finite = errors[np.isfinite(errors)]
    return GradCheck(float(finite.max()) if finite.size else 0.0, errors, kinks, bad)
