"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

The graph is built by running ordinary Python (define-by-run).  Every op returns a
new :class:`Tensor`; when gradients are enabled and at least one input requires a
gradient, the op records its parents and a vector-Jacobian product closure.
:func:`backward` then walks the graph in reverse topological order.

    >>> x = Tensor(3.0, requires_grad=True)
    >>> y = square(x)
    >>> backward(y)
    >>> float(x.grad)
    6.0
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import DomainError, ShapeError

__all__ = [
    "Tensor",
    "Parameter",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "leaky_relu",
    "softplus",
    "softmax",
    "log_softmax",
    "logsumexp",
    "concat",
    "slice_by_mask",
    "getitem",
    "take_along_axis",
    "reshape",
    "sum",
    "mean",
    "square",
    "logdet",
    "solve",
    "gru_cell",
    "finite_difference_grad",
]

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A node in the computation graph holding a float64 array."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None
        self.op = None

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
        return float(self.data.reshape(()) if self.data.size == 1 else self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self):
        return len(self.data)

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Parameter(Tensor):
    """A named leaf tensor owned by a model."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name="", trainable=True):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp, op):
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
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


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, "operands cannot be broadcast together", (a.shape, b.shape)) from None


def backward(root):
    """Populate ``.grad`` of every tensor reachable from the scalar ``root``.

    Leaf gradients accumulate across calls; call ``zero_grad`` between steps.
    """
    if root.size != 1:
        raise ShapeError("backward", "root must be a scalar", (root.shape,))
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._parents:
            node.grad = g
            for p, gp in zip(node._parents, node._vjp(g)):
                if gp is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + gp
                else:
                    grads[key] = gp
        else:
            node.grad = g if node.grad is None else node.grad + g


# elementwise binary


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("div", "division by zero")
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def neg(a):
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b):
    """Matrix product with numpy semantics, including batched and 1-D operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul", "scalar operands are not allowed", (a.shape, b.shape))
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError("matmul", "inner dimensions differ", (a.shape, b.shape))
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", "batch dimensions do not broadcast", (a.shape, b.shape)) from None

    def vjp(g):
        ad = a.data[None, :] if a.ndim == 1 else a.data
        bd = b.data[:, None] if b.ndim == 1 else b.data
        gg = g
        if a.ndim == 1:
            gg = np.expand_dims(gg, -2)
        if b.ndim == 1:
            gg = np.expand_dims(gg, -1)
        ga = np.matmul(gg, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), gg)
        if a.ndim == 1:
            ga = ga[..., 0, :]
        if b.ndim == 1:
            gb = gb[..., :, 0]
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), vjp, "matmul")


# elementwise unary


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log", "argument must be strictly positive")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    a = _as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def leaky_relu(a, alpha=0.01):
    a = _as_tensor(a)
    if alpha <= 0:
        raise DomainError("leaky_relu", "alpha must be positive")
    slope = np.where(a.data >= 0, 1.0, alpha)
    return _make(a.data * slope, (a,), lambda g: (g * slope,), "leaky_relu")


def softplus(a):
    a = _as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _make(out, (a,), lambda g: (g * _sigmoid(a.data),), "softplus")


def square(a):
    a = _as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


# reductions


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    a = _as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _make(out, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims),), "sum")


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    n = a.size / max(out.size, 1)
    return _make(
        out, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / n,), "mean"
    )


def logsumexp(a, axis=-1, keepdims=False):
    a = _as_tensor(a)
    mx = np.max(a.data, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    s = np.log(np.sum(np.exp(a.data - mx), axis=axis, keepdims=True)) + mx
    out = s if keepdims else np.squeeze(s, axis=axis)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * np.exp(a.data - s),)

    return _make(out, (a,), vjp, "logsumexp")


def log_softmax(a, axis=-1):
    a = _as_tensor(a)
    mx = np.max(a.data, axis=axis, keepdims=True)
    out = a.data - mx - np.log(np.sum(np.exp(a.data - mx), axis=axis, keepdims=True))
    p = np.exp(out)
    return _make(
        out, (a,), lambda g: (g - p * np.sum(g, axis=axis, keepdims=True),), "log_softmax"
    )


def softmax(a, axis=-1):
    a = _as_tensor(a)
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)
    return _make(
        out,
        (a,),
        lambda g: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),),
        "softmax",
    )


# structural


def concat(tensors, axis=-1):
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat", "nothing to concatenate")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", "non-concatenated dimensions differ", [t.shape for t in ts]) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(ts), vjp, "concat")


def slice_by_mask(a, mask, axis=-1):
    """Keep entries along ``axis`` where ``mask`` is nonzero, preserving order."""
    a = _as_tensor(a)
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 1 or mask.shape[0] != a.shape[axis]:
        raise ShapeError("slice_by_mask", "mask length must match the indexed axis", (a.shape, mask.shape))
    idx = np.flatnonzero(mask)
    out = np.take(a.data, idx, axis=axis)

    def vjp(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = idx
        full[tuple(sl)] = g
        return (full,)

    return _make(out, (a,), vjp, "slice_by_mask")


def getitem(a, idx):
    a = _as_tensor(a)
    out = a.data[idx]
    key = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(k, (slice, int, type(None), type(Ellipsis))) for k in key)

    def vjp(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out), (a,), vjp, "getitem")


def take_along_axis(a, indices, axis=-1):
    a = _as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take_along_axis(a.data, indices, axis=axis)

    def vjp(g):
        full = np.zeros_like(a.data)
        ax = axis % a.ndim
        grids = np.indices(indices.shape, sparse=True)
        index = tuple(indices if i == ax else grids[i] for i in range(a.ndim))
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (a,), vjp, "take_along_axis")


def reshape(a, shape):
    a = _as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


# linear algebra


def logdet(a):
    """``log|det A|`` over the last two axes (LU with partial pivoting)."""
    a = _as_tensor(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError("logdet", "expected square matrices", (a.shape,))
    sign, val = np.linalg.slogdet(a.data)
    if np.any(sign == 0):
        raise DomainError("logdet", "matrix is singular")

    def vjp(g):
        inv_t = np.swapaxes(np.linalg.inv(a.data), -1, -2)
        return (g[..., None, None] * inv_t,)

    return _make(val, (a,), vjp, "logdet")


def solve(a, b):
    """Solve ``A x = b`` for vectors ``b`` batched along leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2] or b.shape[-1] != a.shape[-1]:
        raise ShapeError("solve", "expected square A and matching right-hand side", (a.shape, b.shape))
    try:
        x = np.linalg.solve(a.data, b.data[..., None])[..., 0]
    except np.linalg.LinAlgError:
        raise DomainError("solve", "matrix is singular") from None

    def vjp(g):
        gb = np.linalg.solve(np.swapaxes(a.data, -1, -2), g[..., None])[..., 0]
        ga = -gb[..., :, None] * x[..., None, :]
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(x, (a, b), vjp, "solve")


# recurrent unit


def gru_cell(x, h, w_input, w_hidden, b_input, b_hidden):
    """One GRU update.

    ``w_input`` is ``(in, 3H)`` and ``w_hidden`` is ``(H, 3H)`` with gate columns
    ordered (reset, update, candidate)::

        r = sigmoid(x Wr + br + h Ur + cr)
        z = sigmoid(x Wz + bz + h Uz + cz)
        n = tanh(x Wn + bn + r * (h Un + cn))
        h' = (1 - z) * n + z * h
    """
    x, h = _as_tensor(x), _as_tensor(h)
    if x.ndim != 2 or h.ndim != 2 or x.shape[0] != h.shape[0]:
        raise ShapeError("gru_cell", "x and h must be (batch, features) with equal batch", (x.shape, h.shape))
    if w_input.shape[0] != x.shape[1] or w_hidden.shape[0] != h.shape[1]:
        raise ShapeError("gru_cell", "weight shapes do not match inputs", (x.shape, h.shape, w_input.shape, w_hidden.shape))
    return gru_step(matmul(x, w_input) + b_input, h, w_hidden, b_hidden)


def gru_step(xproj, h, w_hidden, b_hidden):
    """GRU update given the precomputed input projection ``x W + b``."""
    hsize = h.shape[1]
    hproj = matmul(h, w_hidden) + b_hidden
    rz = sigmoid(xproj[:, : 2 * hsize] + hproj[:, : 2 * hsize])
    r = rz[:, :hsize]
    z = rz[:, hsize:]
    n = tanh(xproj[:, 2 * hsize :] + r * hproj[:, 2 * hsize :])
    return n + z * (h - n)


def finite_difference_grad(f, x, h=1e-5, indices=None):
    """Central-difference gradient of scalar ``f`` w.r.t. array ``x`` (modified in place).

    ``indices`` restricts the evaluation to a subset of flat positions.
    """
    if not x.flags.c_contiguous:
        raise ValueError("x must be C-contiguous so it can be perturbed in place")
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(len(idx))
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[j] = (fp - fm) / (2 * h)
    return out
