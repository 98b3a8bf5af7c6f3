"""Dense 2-D tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` whose ``_node``
records its parents and a backward rule. Calling :meth:`Tensor.backward` on a
scalar walks those records in reverse topological order (the tape), then
drops them so the graph can be garbage collected.

All values are float64 and strictly rank 2; a "scalar" is a 1x1 tensor.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericDomainError(ArithmeticError):
    """An operation produced a non-finite value."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class _Node:
    __slots__ = ("parents", "backward")

    def __init__(self, parents, backward):
        self.parents = parents
        self.backward = backward


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "_node", "name", "__weakref__")

    def __init__(self, values, requires_grad=False, name=None):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are rank 2, got shape {arr.shape}")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self.name = name

    @classmethod
    def _wrap(cls, arr):
        # op outputs are fresh arrays; skip the defensive copy
        if not (isinstance(arr, np.ndarray) and arr.dtype == np.float64 and arr.ndim == 2):
            return cls(arr)
        t = cls.__new__(cls)
        t.values = arr
        t.requires_grad = False
        t.grad = None
        t._node = None
        t.name = None
        return t

    @property
    def shape(self):
        return self.values.shape

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def cols(self):
        return self.values.shape[1]

    @property
    def tape_node(self):
        return self._node

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.values

    def item(self):
        if self.values.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def detach(self):
        return Tensor(self.values.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return subtract(self, _lift(other))

    def __rsub__(self, other):
        return subtract(_lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=np.float64), (1, 1)))


def custom_op(values, parents, backward_rule):
    """Wrap ``values`` as the output of a differentiable operation.

    ``backward_rule(g)`` receives the gradient w.r.t. the output and returns
    one gradient array (or ``None``) per parent, in order. Parents that do
    not require gradients are skipped during the backward pass.
    """
    out = Tensor._wrap(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(tuple(parents), backward_rule)
    return out


class Tape:
    """Operations reachable from one output, inputs before outputs."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out):
        order = []
        seen = set()
        stack = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for p in t._node.parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def _accumulate(t, g):
    if g.shape != t.values.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {t.values.shape}")
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def backward(loss):
    """Populate ``.grad`` of every requires-grad tensor that ``loss`` depends on."""
    if loss.values.size != 1:
        raise ShapeError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    tape = Tape.from_output(loss)
    _accumulate(loss, np.ones((1, 1)))
    for t in reversed(tape.nodes):
        node = t._node
        if node is None or t.grad is None:
            continue
        grads = node.backward(t.grad)
        for p, g in zip(node.parents, grads):
            if g is not None and p.requires_grad:
                _accumulate(p, g)
    # the tape lives for one backward pass
    for t in tape.nodes:
        t._node = None
    return tape


def _check_finite(values, opname):
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[0]
        idx = tuple(int(i) for i in bad)
        raise NumericDomainError(f"{opname} produced a non-finite value at entry {idx}", index=idx)


# ----------------------------------------------------------------------
# differentiable operations


def matmul(a, b):
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    return custom_op(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def _same_shape(a, b, opname):
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: shapes differ, {a.shape} vs {b.shape}")


def add(a, b):
    if b.shape == (1, 1) and a.shape != (1, 1):
        return custom_op(a.values + b.values, (a, b), lambda g: (g, g.sum(keepdims=True)))
    if a.shape == (1, 1) and b.shape != (1, 1):
        return custom_op(a.values + b.values, (a, b), lambda g: (g.sum(keepdims=True), g))
    _same_shape(a, b, "add")
    return custom_op(a.values + b.values, (a, b), lambda g: (g, g))


def subtract(a, b):
    return add(a, scale(b, -1.0))


def multiply(a, b):
    """Entrywise (Hadamard) product."""
    _same_shape(a, b, "multiply")
    av, bv = a.values, b.values
    return custom_op(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a, c):
    c = float(c)
    return custom_op(a.values * c, (a,), lambda g: (g * c,))


def transpose(a):
    return custom_op(a.values.T.copy(), (a,), lambda g: (g.T,))


def add_row_broadcast(a, b):
    """Add the 1 x d row ``b`` to every row of ``a`` (the ``1 b^T`` bias term)."""
    if b.rows != 1 or b.cols != a.cols:
        raise ShapeError(f"add_row_broadcast: need b of shape (1, {a.cols}), got {b.shape}")
    return custom_op(a.values + b.values, (a, b), lambda g: (g, g.sum(axis=0, keepdims=True)))


def elementwise(a, f, fprime, name="elementwise"):
    """Apply scalar function ``f`` entrywise; backward multiplies by ``fprime``.

    Both callables take and return numpy arrays. Raises
    :class:`NumericDomainError` if ``f`` yields NaN or Inf anywhere.
    """
    av = a.values
    with np.errstate(all="ignore"):
        out = np.asarray(f(av), dtype=np.float64)
    _check_finite(out, name)
    return custom_op(out, (a,), lambda g: (g * fprime(av),))


def tanh(a):
    return elementwise(a, np.tanh, lambda x: 1.0 - np.tanh(x) ** 2, "tanh")


def relu(a):
    return elementwise(a, lambda x: np.maximum(x, 0.0), lambda x: (x > 0).astype(np.float64), "relu")


def leaky_relu(a, slope=0.2):
    return elementwise(a, lambda x: np.where(x >= 0, x, slope * x),
                       lambda x: np.where(x >= 0, 1.0, slope), "leaky_relu")


def softplus(a):
    return elementwise(a, lambda x: np.logaddexp(0.0, x), lambda x: 0.5 * (1.0 + np.tanh(0.5 * x)), "softplus")


def sum(a):  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return custom_op(np.array([[a.values.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def mean_rows(a):
    """Column-wise mean over rows, shape (1, cols)."""
    n = a.rows
    return custom_op(a.values.mean(axis=0, keepdims=True), (a,),
                     lambda g: (np.repeat(g, n, axis=0) / n,))


def concat_cols(tensors):
    tensors = list(tensors)
    n = tensors[0].rows
    for t in tensors:
        if t.rows != n:
            raise ShapeError(f"concat_cols: row counts differ, {[t.shape for t in tensors]}")
    widths = np.cumsum([0] + [t.cols for t in tensors])

    def rule(g):
        return tuple(g[:, widths[i]:widths[i + 1]] for i in range(len(tensors)))

    return custom_op(np.concatenate([t.values for t in tensors], axis=1), tensors, rule)


def slice_cols(a, start, stop):
    """Columns ``start:stop`` of ``a``."""
    if not 0 <= start <= stop <= a.cols:
        raise ShapeError(f"slice_cols: [{start}:{stop}] out of range for {a.shape}")
    shape = a.shape

    def rule(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return custom_op(a.values[:, start:stop].copy(), (a,), rule)


def gather_rows(a, idx):
    """Rows ``a[idx]``; backward scatter-adds into the source rows."""
    from .kernels import scatter_add_rows

    idx = np.asarray(idx, dtype=np.int64)
    n = a.rows
    return custom_op(a.values[idx], (a,), lambda g: (scatter_add_rows(idx, g, n),))


def frobenius_inner(a, b):
    """<A, B> = tr(A^T B), as a 1x1 tensor."""
    _same_shape(a, b, "frobenius_inner")
    av, bv = a.values, b.values
    return custom_op(np.array([[np.sum(av * bv)]]), (a, b),
                     lambda g: (g[0, 0] * bv, g[0, 0] * av))


def dropout(a, rate, rng, training=True):
    """Inverted dropout. Deterministic for a given generator state."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return custom_op(a.values * keep, (a,), lambda g: (g * keep,))


def softmax_rows(a):
    z = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        return (s * (g - np.sum(g * s, axis=1, keepdims=True)),)

    return custom_op(s, (a,), rule)


def log_softmax_rows(a):
    z = a.values - a.values.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return custom_op(out, (a,), lambda g: (g - s * g.sum(axis=1, keepdims=True),))


def cross_entropy(logits, labels, mask):
    """Mean negative log-likelihood of ``labels`` over rows where ``mask`` holds."""
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    n, c = logits.shape
    if labels.shape != (n,) or mask.shape != (n,):
        raise ShapeError(f"cross_entropy: labels/mask must have length {n}")
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        raise ValueError("no training nodes")
    y = labels[rows]
    if y.min() < 0 or y.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits.values[rows]
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(rows.size), y].mean()

    def rule(g):
        grad = np.zeros((n, c))
        p = np.exp(logp)
        p[np.arange(rows.size), y] -= 1.0
        grad[rows] = p * (g[0, 0] / rows.size)
        return (grad,)

    return custom_op(np.array([[loss]]), (logits,), rule)


def argmax_rows(a):
    """Index of the largest entry in each row (not differentiable)."""
    return np.argmax(a.values, axis=1)
