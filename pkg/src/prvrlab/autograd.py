"""Small dense-tensor engine with reverse-mode differentiation.

Everything is a thin layer over numpy arrays. A :class:`Tensor` remembers the
op that produced it and a closure mapping the output gradient to input
gradients; :func:`backward` walks the recorded graph once in reverse
topological order.

All ops reject non-finite results: a NaN or Inf anywhere raises
:class:`NonFiniteError` naming the op that produced it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.name = name
        self._parents = _parents
        self._backward = _backward

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self):
        return self.data.shape[0]

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    return arr


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager: ops inside record nothing."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev


def _make(data, parents, backward, op):
    parents = tuple(parents)
    need = _GRAD_ENABLED[0] and any(p.requires_grad for p in parents)
    data = _finite(np.asarray(data), op)
    if not need:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU (smooth everywhere, which keeps grad checks honest)."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), bw, "gelu")


# -- linear algebra & shape -------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def take(a, idx) -> Tensor:
    """Basic or fancy indexing with a scatter-add backward."""
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        raise TypeError("index with arrays, not tensors")
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), bw, "take")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(out, ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(out, ts, bw, "stack")


# -- reductions ---------------------------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _make(out, (a,), lambda g: (_expand(g, a.shape, axis, keepdims).copy(),), "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size / max(out.size, 1)
    return _make(out, (a,), lambda g: (_expand(g, a.shape, axis, keepdims) / n,), "mean")


def max_(a, axis=None, keepdims=False) -> Tensor:
    """Maximum; the gradient goes to the first maximal entry only."""
    a = as_tensor(a)
    if axis is None:
        flat = a.data.reshape(-1)
        i = int(np.argmax(flat))
        out = flat[i]

        def bw(g):
            full = np.zeros(flat.shape, dtype=a.dtype)
            full[i] = g
            return (full.reshape(a.shape),)

        return _make(np.array(out), (a,), bw, "max")

    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), gk, axis=axis)
        return (full,)

    return _make(out if keepdims else np.squeeze(out, axis), (a,), bw, "max")


def logsumexp(a, axis=-1, mask=None, keepdims=False) -> Tensor:
    """log(sum(exp(a))) along ``axis``; ``mask`` (bool) selects the summed entries.

    Every reduced slice must contain at least one selected entry.
    """
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(mask.any(axis=axis)):
            raise ValueError("logsumexp: empty masked slice")
        xm = np.where(mask, x, -np.inf)
    else:
        xm = x
    m = np.max(xm, axis=axis, keepdims=True)
    e = np.exp(xm - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    w = e / s

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * w,)

    return _make(out if keepdims else np.squeeze(out, axis), (a,), bw, "logsumexp")


# -- composite ops with fused backward --------------------------------------

def softmax(a, axis=-1, bias=None) -> Tensor:
    """Softmax with an optional additive constant bias on the logits."""
    a = as_tensor(a)
    x = a.data if bias is None else a.data + np.asarray(bias)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        gx = out * (g - (g * out).sum(axis=axis, keepdims=True))
        return (_unbroadcast(gx, a.shape),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: feature dim {x.shape} vs gain {gain.shape} / bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = x.shape[-1]

    def bw(g):
        gxhat = g * gain.data
        gx = inv / n * (n * gxhat - gxhat.sum(-1, keepdims=True) - xhat * (gxhat * xhat).sum(-1, keepdims=True))
        gg = (g * xhat).reshape(-1, n).sum(0)
        gb = g.reshape(-1, n).sum(0)
        return gx, gg, gb

    return _make(out, (x, gain, bias), bw, "layer_norm")


def l2_norm(x, axis=-1, keepdims=False) -> Tensor:
    """Euclidean norm along ``axis``. Zero-norm slices are an error."""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(n == 0):
        raise ZeroDivisionError("l2_norm: zero-norm vector")

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * x.data / n,)

    return _make(n if keepdims else np.squeeze(n, axis), (x,), bw, "l2_norm")


def normalize(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    return div(x, l2_norm(x, axis=axis, keepdims=True))


def cosine_sim(x, y) -> Tensor:
    """Cosine similarity of two vectors; zero-norm input raises."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"cosine_sim: expected equal 1-D shapes, got {x.shape} and {y.shape}")
    if not np.any(x.data) or not np.any(y.data):
        raise ZeroDivisionError("cosine_sim: zero-norm input")
    return sum_(normalize(x) * normalize(y))


def cosine_matrix(a, b) -> Tensor:
    """Row-wise cosine similarities, ``[..., n, d] x [..., m, d] -> [..., n, m]``."""
    return matmul(normalize(a), swapaxes(normalize(b), -1, -2))


def huber(a, b, delta: float = 1.0) -> Tensor:
    """Elementwise Huber penalty of ``a - b``."""
    if delta <= 0:
        raise ValueError("huber: delta must be positive")
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "huber")
    e = a.data - b.data
    ae = np.abs(e)
    quad = ae <= delta
    out = np.where(quad, 0.5 * e * e, delta * (ae - 0.5 * delta))
    de = np.where(quad, e, delta * np.sign(e))

    def bw(g):
        return _unbroadcast(g * de, a.shape), _unbroadcast(-g * de, b.shape)

    return _make(out, (a, b), bw, "huber")


# -- graph & backward ----------------------------------------------------------

@dataclass
class Graph:
    """Op records reachable from a root, in topological order (inputs first)."""

    nodes: list = field(default_factory=list)
    leaves: list = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
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
        leaves = [n for n in order if n.is_leaf and n.requires_grad]
        return cls(nodes=order, leaves=leaves)


def backward(loss: Tensor) -> dict:
    """Accumulate d loss / d leaf into ``leaf.grad``; returns ``{leaf: grad}``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    graph = Graph.from_root(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=parent.dtype)
    return {leaf: leaf.grad for leaf in graph.leaves}


# -- finite-difference checker ------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst_param: int
    worst_index: tuple
    n_checked: int

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return (f"grad_check {status}: max_rel_err={self.max_rel_err:.3e} "
                f"at param {self.worst_param} index {self.worst_index} ({self.n_checked} coords)")


def grad_check(
    f: Callable[..., Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-6,
    grads: Sequence[np.ndarray] | None = None,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f(*params)`` with central differences.

    Relative error per coordinate is ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.
    ``grads`` overrides the analytic gradients (used for negative controls).
    ``max_coords`` caps the number of coordinates probed per parameter; the
    subset is drawn with ``seed``.
    """
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("grad_check requires float64 parameters")

    if grads is None:
        for p in params:
            p.grad = None
            p.requires_grad = True
        loss = f(*params)
        _require_finite_scalar(loss)
        backward(loss)
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]

    rng = np.random.default_rng(seed)
    worst = (0.0, 0, ())
    count = 0
    for k, (p, g) in enumerate(zip(params, grads)):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = _require_finite_scalar(f(*params))
            flat[c] = orig - h
            fm = _require_finite_scalar(f(*params))
            flat[c] = orig
            g_fd = (fp - fm) / (2 * h)
            g_ad = float(np.asarray(g).reshape(-1)[c])
            rel = abs(g_ad - g_fd) / max(1.0, abs(g_ad), abs(g_fd))
            count += 1
            if rel > worst[0] or count == 1:
                worst = (rel, k, np.unravel_index(c, p.shape))
    return GradCheckReport(
        max_rel_err=worst[0],
        passed=worst[0] < tol,
        worst_param=worst[1],
        worst_index=tuple(int(i) for i in worst[2]),
        n_checked=count,
    )


def _require_finite_scalar(t) -> float:
    val = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
    if val.size != 1:
        raise ShapeError(f"grad_check: f must return a scalar, got shape {val.shape}")
    v = float(val)
    if not math.isfinite(v):
        raise NonFiniteError("grad_check: f returned a non-finite value")
    return v
