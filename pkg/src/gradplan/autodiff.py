"""Reverse-mode automatic differentiation on float64 numpy arrays.

Graphs are built define-by-run: every op returns a :class:`Node` that records
its parents and a vector-Jacobian product. :func:`backward` walks the graph in
reverse topological order and accumulates gradients (summing over multiple
paths). Nodes that do not depend on any ``requires_grad`` leaf carry no
parents, so constant subgraphs are freed immediately.

Only the operations the world model and planners need are provided. Two fused
ops (``linear`` and ``gru_cell``) exist purely to keep graphs small.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
_LOG_2PI = math.log(2.0 * math.pi)

# Gate blocks inside the 3*hidden columns of the GRU weight matrices.
GRU_GATE_ORDER = ("reset", "update", "candidate")


class ShapeError(ValueError):
    """Raised when an op receives inputs with incompatible shapes."""

    def __init__(self, op: str, shapes: Sequence[tuple], detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


def as_tensor(data) -> np.ndarray:
    """Validate external data as a finite float64 array."""
    arr = np.array(data, dtype=DTYPE)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor data contains NaN or Inf")
    return arr


class Node:
    __slots__ = ("value", "op", "parents", "grad", "requires_grad", "_vjp")

    def __init__(self, value, op="leaf", parents=(), vjp=None, requires_grad=False):
        self.value = value
        self.op = op
        self.parents = parents
        self.grad = None
        self.requires_grad = requires_grad
        self._vjp = vjp

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    __array_priority__ = 1000

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)


def variable(data) -> Node:
    """Leaf that receives gradients."""
    return Node(as_tensor(data), requires_grad=True)


def constant(data) -> Node:
    """Leaf excluded from differentiation."""
    return Node(as_tensor(data))


def _wrap(x) -> Node:
    if isinstance(x, Node):
        return x
    return Node(as_tensor(x))


def _make(value, op, parents, vjp) -> Node:
    if any(p.requires_grad for p in parents):
        return Node(value, op, parents, vjp, True)
    return Node(value, op)


def detach(x) -> Node:
    x = _wrap(x)
    return Node(x.value, "detach")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, [a.shape, b.shape], "not broadcastable") from None


# --- binary elementwise -----------------------------------------------------


def add(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("add", a, b)

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(a.value + b.value, "add", (a, b), vjp)


def sub(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("sub", a, b)

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _make(a.value - b.value, "sub", (a, b), vjp)


def mul(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value

    def vjp(g):
        return (_unbroadcast(g * bv, a.shape) if a.requires_grad else None,
                _unbroadcast(g * av, b.shape) if b.requires_grad else None)

    return _make(av * bv, "mul", (a, b), vjp)


def div(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("div", a, b)
    av, bv = a.value, b.value
    out = av / bv

    def vjp(g):
        return (_unbroadcast(g / bv, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bv, b.shape) if b.requires_grad else None)

    return _make(out, "div", (a, b), vjp)


def matmul(a, b) -> Node:
    """``a @ b`` for ``a`` of shape (..., n) and ``b`` of shape (n, k) or (n,)."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 1 or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", [a.shape, b.shape])
    av, bv = a.value, b.value
    out = av @ bv

    if b.ndim == 2:
        def vjp(g):
            ga = g @ bv.T if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, bv.shape[1])
            return ga, gb
    else:
        def vjp(g):
            ga = np.multiply.outer(g, bv) if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = av.reshape(-1, av.shape[-1]).T @ np.reshape(g, -1)
            return ga, gb

    return _make(out, "matmul", (a, b), vjp)


def linear(x, w, b) -> Node:
    """Fused affine map ``x @ w + b`` with ``w`` of shape (n, k), ``b`` of shape (k,)."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError("linear", [x.shape, w.shape, b.shape])
    xv, wv = x.value, w.value
    out = xv @ wv + b.value

    def vjp(g):
        g2 = g.reshape(-1, wv.shape[1])
        return (g @ wv.T if x.requires_grad else None,
                xv.reshape(-1, wv.shape[0]).T @ g2 if w.requires_grad else None,
                g2.sum(axis=0) if b.requires_grad else None)

    return _make(out, "linear", (x, w, b), vjp)


def maximum(x, floor: float) -> Node:
    """Elementwise ``max(x, floor)``; no gradient flows where the floor is active."""
    x = _wrap(x)
    active = x.value > floor
    out = np.where(active, x.value, floor)

    def vjp(g):
        return (g * active,)

    return _make(out, "maximum", (x,), vjp)


# --- unary elementwise ------------------------------------------------------


def _unary(name: str, fn: Callable, dfn: Callable) -> Callable[[object], Node]:
    def op(x) -> Node:
        x = _wrap(x)
        out = fn(x.value)

        def vjp(g):
            return (g * dfn(x.value, out),)

        return _make(out, name, (x,), vjp)

    op.__name__ = name
    return op


def _sigmoid(v):
    return 0.5 * (np.tanh(0.5 * v) + 1.0)


neg = _unary("neg", np.negative, lambda x, y: -1.0)
tanh = _unary("tanh", np.tanh, lambda x, y: 1.0 - y * y)
sigmoid = _unary("sigmoid", _sigmoid, lambda x, y: y * (1.0 - y))
relu = _unary("relu", lambda v: np.maximum(v, 0.0), lambda x, y: (x > 0).astype(DTYPE))
softplus = _unary("softplus", lambda v: np.logaddexp(0.0, v), lambda x, y: _sigmoid(x))
square = _unary("square", np.square, lambda x, y: 2.0 * x)
exp = _unary("exp", np.exp, lambda x, y: y)
log = _unary("log", np.log, lambda x, y: 1.0 / x)
sqrt = _unary("sqrt", np.sqrt, lambda x, y: 0.5 / y)
sin = _unary("sin", np.sin, lambda x, y: np.cos(x))
cos = _unary("cos", np.cos, lambda x, y: -np.sin(x))


# --- reductions and structure -----------------------------------------------


def sum(x, axis=None, keepdims: bool = False) -> Node:  # noqa: A001 - mirrors numpy
    x = _wrap(x)
    out = np.sum(x.value, axis=axis, keepdims=keepdims)
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(out, dtype=DTYPE), "sum", (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Node:
    x = _wrap(x)
    count = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(xs: Sequence, axis: int = -1) -> Node:
    xs = [_wrap(x) for x in xs]
    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError:
        raise ShapeError("concat", [x.shape for x in xs]) from None
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, "concat", tuple(xs), vjp)


def stack(xs: Sequence, axis: int = 0) -> Node:
    xs = [_wrap(x) for x in xs]
    try:
        out = np.stack([x.value for x in xs], axis=axis)
    except ValueError:
        raise ShapeError("stack", [x.shape for x in xs]) from None

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(out, "stack", tuple(xs), vjp)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def take(x, index) -> Node:
    """Indexing/slicing (the ``slice`` op)."""
    x = _wrap(x)
    try:
        out = x.value[index]
    except IndexError as err:
        raise ShapeError("slice", [x.shape], str(err)) from None
    basic = _is_basic_index(index)

    def vjp(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, dtype=DTYPE), "slice", (x,), vjp)


def reshape(x, shape) -> Node:
    x = _wrap(x)
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", [x.shape, tuple(np.atleast_1d(shape))]) from None

    def vjp(g):
        return (g.reshape(x.shape),)

    return _make(out, "reshape", (x,), vjp)


def broadcast_to(x, shape) -> Node:
    x = _wrap(x)
    try:
        out = np.broadcast_to(x.value, shape)
    except ValueError:
        raise ShapeError("broadcast_to", [x.shape, tuple(shape)]) from None

    def vjp(g):
        return (_unbroadcast(g, x.shape),)

    return _make(np.array(out), "broadcast_to", (x,), vjp)


# --- gaussian ops -----------------------------------------------------------


@dataclass
class GaussianParams:
    """Diagonal Gaussian with strictly positive elementwise stddev."""

    mean: Node
    stddev: Node

    def __post_init__(self):
        self.mean = _wrap(self.mean)
        self.stddev = _wrap(self.stddev)
        if self.mean.shape != self.stddev.shape:
            raise ShapeError("GaussianParams", [self.mean.shape, self.stddev.shape])
        if not np.all(self.stddev.value > 0):
            raise ValueError("GaussianParams: stddev must be strictly positive")


def positive_stddev(raw, floor: float = 1e-4) -> Node:
    """softplus(raw) + floor."""
    return add(softplus(raw), floor)


def gaussian_sample(mean, stddev, eps) -> Node:
    """Reparameterised sample ``mean + stddev * eps`` with ``eps`` held fixed."""
    mean, stddev = _wrap(mean), _wrap(stddev)
    eps = np.asarray(eps, dtype=DTYPE)
    if not (mean.shape == stddev.shape == eps.shape):
        raise ShapeError("gaussian_sample", [mean.shape, stddev.shape, eps.shape])

    def vjp(g):
        return g, g * eps

    return _make(mean.value + stddev.value * eps, "gaussian_sample", (mean, stddev), vjp)


def gaussian_log_density(x, mean, stddev) -> Node:
    """log N(x; mean, diag(stddev^2)) summed over the last axis."""
    x, mean, stddev = _wrap(x), _wrap(mean), _wrap(stddev)
    try:
        shape = np.broadcast_shapes(x.shape, mean.shape, stddev.shape)
    except ValueError:
        raise ShapeError("gaussian_log_density", [x.shape, mean.shape, stddev.shape]) from None
    if len(shape) == 0:
        raise ShapeError("gaussian_log_density", [x.shape, mean.shape, stddev.shape], "needs an event axis")
    s = stddev.value
    z = (x.value - mean.value) / s
    out = np.sum(-0.5 * z * z - np.log(s) - 0.5 * _LOG_2PI * np.ones(shape), axis=-1)

    def vjp(g):
        g = g[..., None]
        return (_unbroadcast(-g * z / s, x.shape) if x.requires_grad else None,
                _unbroadcast(g * z / s, mean.shape) if mean.requires_grad else None,
                _unbroadcast(g * (z * z - 1.0) / s, stddev.shape) if stddev.requires_grad else None)

    return _make(out, "gaussian_log_density", (x, mean, stddev), vjp)


def _kl_op(qm, qs, pm, ps) -> Node:
    qm, qs, pm, ps = (_wrap(v) for v in (qm, qs, pm, ps))
    if not (qm.shape == qs.shape == pm.shape == ps.shape):
        raise ShapeError("diagonal_gaussian_kl", [qm.shape, qs.shape, pm.shape, ps.shape])
    if not (np.all(qs.value > 0) and np.all(ps.value > 0)):
        raise ValueError("diagonal_gaussian_kl: stddev must be strictly positive")
    d = qm.value - pm.value
    q2, p2 = qs.value ** 2, ps.value ** 2
    elem = np.log(ps.value / qs.value) + (q2 + d * d) / (2.0 * p2) - 0.5
    out = np.sum(elem, axis=-1)

    def vjp(g):
        g = g[..., None]
        return (g * d / p2,
                g * (qs.value / p2 - 1.0 / qs.value),
                -g * d / p2,
                g * (1.0 / ps.value - (q2 + d * d) / (p2 * ps.value)))

    return _make(out, "diagonal_gaussian_kl", (qm, qs, pm, ps), vjp)


def diagonal_gaussian_kl(q: GaussianParams, p: GaussianParams) -> Node:
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    return _kl_op(q.mean, q.stddev, p.mean, p.stddev)


# --- recurrent cell ---------------------------------------------------------


def gru_cell(x, h, w_x, w_h, b_x, b_h) -> Node:
    """One GRU step.

    ``w_x`` is (inputs, 3*hidden) and ``w_h`` is (hidden, 3*hidden); the three
    column blocks hold the reset, update and candidate gates in that order::

        r = sigmoid(x w_xr + b_xr + h w_hr + b_hr)
        z = sigmoid(x w_xz + b_xz + h w_hz + b_hz)
        n = tanh(x w_xn + b_xn + r * (h w_hn + b_hn))
        h' = (1 - z) * n + z * h
    """
    x, h, w_x, w_h, b_x, b_h = (_wrap(v) for v in (x, h, w_x, w_h, b_x, b_h))
    n_h = h.shape[-1]
    ok = (w_x.ndim == 2 and w_h.shape == (n_h, 3 * n_h) and w_x.shape == (x.shape[-1], 3 * n_h)
          and b_x.shape == (3 * n_h,) and b_h.shape == (3 * n_h,) and x.shape[:-1] == h.shape[:-1])
    if not ok:
        raise ShapeError("gru_cell", [x.shape, h.shape, w_x.shape, w_h.shape, b_x.shape, b_h.shape])
    xv, hv = x.value, h.value
    gx = xv @ w_x.value + b_x.value
    gh = hv @ w_h.value + b_h.value
    r = _sigmoid(gx[..., :n_h] + gh[..., :n_h])
    z = _sigmoid(gx[..., n_h:2 * n_h] + gh[..., n_h:2 * n_h])
    hn = gh[..., 2 * n_h:]
    n = np.tanh(gx[..., 2 * n_h:] + r * hn)
    out = (1.0 - z) * n + z * hv

    def vjp(g):
        dn = g * (1.0 - z) * (1.0 - n * n)
        dr = dn * hn * r * (1.0 - r)
        dz = g * (hv - n) * z * (1.0 - z)
        dgx = np.concatenate([dr, dz, dn], axis=-1)
        dgh = np.concatenate([dr, dz, dn * r], axis=-1)
        flat_gx = dgx.reshape(-1, 3 * n_h)
        flat_gh = dgh.reshape(-1, 3 * n_h)
        return (dgx @ w_x.value.T if x.requires_grad else None,
                dgh @ w_h.value.T + g * z if h.requires_grad else None,
                xv.reshape(-1, xv.shape[-1]).T @ flat_gx if w_x.requires_grad else None,
                hv.reshape(-1, n_h).T @ flat_gh if w_h.requires_grad else None,
                flat_gx.sum(axis=0) if b_x.requires_grad else None,
                flat_gh.sum(axis=0) if b_h.requires_grad else None)

    return _make(out, "gru_cell", (x, h, w_x, w_h, b_x, b_h), vjp)


# --- backward ---------------------------------------------------------------


def _topological_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Node) -> dict[Node, np.ndarray]:
    """Gradients of scalar ``root`` w.r.t. every node that requires grad.

    Each node's ``grad`` attribute is set as a side effect. Gradients arriving
    along several paths are summed.
    """
    if root.value.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    grads: dict[Node, np.ndarray] = {root: np.ones_like(root.value)}
    for node in reversed(_topological_order(root)):
        g = grads.get(node)
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent)
            grads[parent] = pg if prev is None else prev + pg
    for node, g in grads.items():
        node.grad = np.array(g, dtype=DTYPE).reshape(node.shape)
    return {node: node.grad for node in grads}


def grad(fn: Callable[..., Node], inputs: Iterable) -> list[np.ndarray]:
    """Convenience: gradient of scalar ``fn(*inputs)`` w.r.t. each input array."""
    leaves = [variable(x) for x in inputs]
    out = fn(*leaves)
    grads = backward(out)
    return [grads.get(leaf, np.zeros(leaf.shape)) for leaf in leaves]


def gradcheck(fn: Callable[..., Node], inputs: Sequence[np.ndarray], rng: np.random.Generator,
              n_directions: int = 8, step: float = 1e-5, floor: float = 1e-8) -> float:
    """Worst relative error between autodiff and central finite differences.

    Compares directional derivatives along random unit directions in the joint
    input space: ``<grad f, d>`` against ``(f(x + h d) - f(x - h d)) / 2h``.
    Relative error is ``|a - b| / max(|a|, |b|, floor)``.
    """
    inputs = [np.asarray(x, dtype=DTYPE) for x in inputs]
    grads = grad(fn, inputs)

    def f(xs):
        return float(fn(*[constant(x) for x in xs]).value)

    worst = 0.0
    for _ in range(n_directions):
        dirs = [rng.standard_normal(x.shape) for x in inputs]
        norm = math.sqrt(np.sum([np.sum(d * d) for d in dirs]))
        dirs = [d / norm for d in dirs]
        analytic = float(np.sum([np.sum(g * d) for g, d in zip(grads, dirs)]))
        plus = f([x + step * d for x, d in zip(inputs, dirs)])
        minus = f([x - step * d for x, d in zip(inputs, dirs)])
        numeric = (plus - minus) / (2.0 * step)
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, err)
    return worst
