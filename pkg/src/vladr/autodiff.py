"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: plain numpy arrays wrapped in
:class:`Tensor` nodes that remember their parents and a backward closure.
Calling :func:`backward` on a scalar walks the recorded graph once in
reverse topological order and accumulates d(root)/d(leaf) into every
``requires_grad`` leaf.  Repeated backward calls on the same graph
accumulate additively.

Everything runs on CPU in double precision so every gradient can be
validated against central finite differences, see
:func:`finite_difference_check`.
"""

from __future__ import annotations

import contextlib

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GraphError(RuntimeError):
    """Backward pass invoked on an unsuitable tensor, or a missing gradient."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward passes only)."""
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
    """A dense float64 array, optionally tracked by the gradient graph.

    Leaves created with ``requires_grad=True`` receive ``.grad`` after a
    backward pass.  Tensors produced by operations carry parent links and
    a backward closure; they never hold ``.grad`` themselves.
    """

    __slots__ = ("data", "requires_grad", "grad", "flags", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.flags = None
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def mT(self):
        return swap_last2(self)

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __neg__(self):
        return neg(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, bwd) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = tuple(parents)
        out._backward_fn = bwd
        return out
    return Tensor(data)


def _sum_to(g: np.ndarray, shape) -> np.ndarray:
    """Reverse numpy broadcasting: reduce ``g`` back to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def bwd(g):
        return _sum_to(g, a.data.shape), _sum_to(g, b.data.shape)

    return _make(data, (a, b), bwd)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data

    def bwd(g):
        return _sum_to(g, a.data.shape), _sum_to(-g, b.data.shape)

    return _make(data, (a, b), bwd)


def neg(a):
    a = _wrap(a)

    def bwd(g):
        return (-g,)

    return _make(-a.data, (a,), bwd)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def bwd(g):
        return _sum_to(g * b.data, a.data.shape), _sum_to(g * a.data, b.data.shape)

    return _make(data, (a, b), bwd)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data / b.data

    def bwd(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _sum_to(ga, a.data.shape), _sum_to(gb, b.data.shape)

    return _make(data, (a, b), bwd)


def pow_scalar(a, p):
    a = _wrap(a)
    p = float(p)

    def bwd(g):
        return (g * p * np.power(a.data, p - 1.0),)

    return _make(np.power(a.data, p), (a,), bwd)


def texp(a):
    a = _wrap(a)
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _make(out, (a,), bwd)


def tlog(a):
    a = _wrap(a)

    def bwd(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), bwd)


def tsqrt(a):
    a = _wrap(a)
    out = np.sqrt(a.data)

    def bwd(g):
        return (g * 0.5 / out,)

    return _make(out, (a,), bwd)


def ttanh(a):
    a = _wrap(a)
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), bwd)


def relu(a):
    a = _wrap(a)
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0.0), (a,), bwd)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape):
    a = _wrap(a)

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return _make(a.data.reshape(shape), (a,), bwd)


def swap_last2(a):
    a = _wrap(a)
    if a.data.ndim < 2:
        raise DimensionError("swap_last2 needs at least 2 dimensions")

    def bwd(g):
        return (g.swapaxes(-1, -2),)

    return _make(a.data.swapaxes(-1, -2), (a,), bwd)


def broadcast_to(a, shape):
    a = _wrap(a)

    def bwd(g):
        return (_sum_to(g, a.data.shape),)

    return _make(np.broadcast_to(a.data, shape), (a,), bwd)


def getitem(a, idx):
    a = _wrap(a)

    def bwd(g):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        return (buf,)

    return _make(a.data[idx], (a,), bwd)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def stack(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]

    def bwd(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _make(data, (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    a = _wrap(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.data.shape).copy(),)

    return _make(data, (a,), bwd)


def amax(a, axis, keepdims=False):
    """Maximum along one axis; ties route the gradient to the first argmax."""
    a = _wrap(a)
    data = a.data.max(axis=axis, keepdims=keepdims)

    def bwd(g):
        idx = np.argmax(a.data, axis=axis)
        buf = np.zeros_like(a.data)
        gg = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(buf, np.expand_dims(idx, axis), gg, axis)
        return (buf,)

    return _make(data, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Matrix product; supports stacked (batched) operands of ndim >= 2."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul operands must have ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}"
        )
    data = np.matmul(a.data, b.data)

    def bwd(g):
        ga = _sum_to(np.matmul(g, b.data.swapaxes(-1, -2)), a.data.shape)
        gb = _sum_to(np.matmul(a.data.swapaxes(-1, -2), g), b.data.shape)
        return ga, gb

    return _make(data, (a, b), bwd)


# ---------------------------------------------------------------------------
# normalizations and gathers


def row_softmax(a, temperature: float = 1.0, axis: int = -1):
    """Softmax along ``axis`` of ``a / temperature``; rows sum to one."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    a = _wrap(a)
    z = a.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return ((g - inner) * s / temperature,)

    return _make(s, (a,), bwd)


def log_softmax(a, axis: int = -1):
    a = _wrap(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bwd(g):
        return (g - np.exp(ls) * g.sum(axis=axis, keepdims=True),)

    return _make(ls, (a,), bwd)


def l2_normalize(a, eps: float = 1e-12):
    """Scale each trailing-axis vector to unit norm.

    Vectors with norm below ``eps`` pass through unchanged; their positions
    are recorded on the output's ``flags["near_zero"]`` mask.
    """
    a = _wrap(a)
    norms = np.linalg.norm(a.data, axis=-1, keepdims=True)
    small = norms < eps
    safe = np.where(small, 1.0, norms)
    y = a.data / safe

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        gx = (g - y * dot) / safe
        return (np.where(small, g, gx),)

    out = _make(y, (a,), bwd)
    if small.any():
        out.flags = {"near_zero": np.squeeze(small, axis=-1)}
    return out


def take_per_row(a, indices):
    """Pick one column per row of a 2-D tensor: ``out[i] = a[i, indices[i]]``."""
    a = _wrap(a)
    if a.data.ndim != 2:
        raise DimensionError("take_per_row expects a 2-D tensor")
    idx = np.asarray(indices, dtype=np.intp)
    rows = np.arange(a.data.shape[0])

    def bwd(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, (rows, idx), g)
        return (buf,)

    return _make(a.data[rows, idx], (a,), bwd)


# ---------------------------------------------------------------------------
# attention


def cross_attention(query, key, value, w_q, w_k, w_v, w_o):
    """Single-head cross attention.

    ``attn = softmax(Q W_q (K W_k)^T / sqrt(d))`` and
    ``out = attn (V W_v) W_o``.  ``key``/``value`` may carry a leading batch
    axis while ``query`` is shared, in which case the outputs are batched.
    Returns ``(out, attn)``.
    """
    query, key, value = _wrap(query), _wrap(key), _wrap(value)
    if key.data.shape != value.data.shape:
        raise DimensionError("key and value shapes must match")
    if query.data.shape[-1] != w_q.data.shape[0] or key.data.shape[-1] != w_k.data.shape[0]:
        raise DimensionError("projection weights do not match input dims")
    d_k = w_q.data.shape[1]
    q = matmul(query, w_q)
    k = matmul(key, w_k)
    v = matmul(value, w_v)
    attn = row_softmax(matmul(q, swap_last2(k)) * (d_k**-0.5))
    out = matmul(matmul(attn, v), w_o)
    return out, attn


# ---------------------------------------------------------------------------
# backward pass


def _topo(root: Tensor):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
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


def backward(root: Tensor):
    """Populate ``.grad`` on every requires_grad leaf reachable from ``root``.

    ``root`` must be a scalar on a gradient graph.  Leaves accumulate: a
    second backward pass over the same graph adds the same gradients again.
    """
    if not isinstance(root, Tensor):
        raise TypeError("backward expects a Tensor")
    if root.data.size != 1:
        raise GraphError(f"backward root must be scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        raise GraphError("root is not attached to a gradient graph")
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(_topo(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# optimizer


def adam_step(params, state: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam update with bias correction; moments persist in ``state``."""
    if "m" not in state:
        state["m"] = [np.zeros_like(p.data) for p in params]
        state["v"] = [np.zeros_like(p.data) for p in params]
        state["step"] = 0
    if len(state["m"]) != len(params):
        raise GraphError("optimizer state does not match parameter list")
    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for i, p in enumerate(params):
        if p.grad is None:
            raise GraphError(f"parameter {i} has no gradient")
        g = p.grad
        m = state["m"][i]
        v = state["v"][i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


class Adam:
    """Adam over a fixed parameter list; thin wrapper around :func:`adam_step`."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict = {}

    def step(self):
        adam_step(self.params, self.state, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# gradient verification


def finite_difference_check(f, x, step: float = 1e-5) -> float:
    """Compare analytic gradients of ``f`` at ``x`` against central differences.

    ``f`` must be a pure scalar-valued function of one tensor.  Returns the
    maximum over coordinates of ``|analytic - fd| / (|analytic| + 1e-8)``.
    """
    x = _wrap(x)
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.zero_grad()
    fd = np.empty_like(x.data)
    flat = x.data.reshape(-1)
    fd_flat = fd.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f(x).data)
            flat[i] = orig - step
            lo = float(f(x).data)
            flat[i] = orig
            fd_flat[i] = (hi - lo) / (2.0 * step)
    rel = np.abs(analytic - fd) / (np.abs(analytic) + 1e-8)
    return float(rel.max())
