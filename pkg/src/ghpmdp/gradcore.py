"""Minimal reverse-mode autodiff over float64 numpy arrays, plus Adam.

A graph is recorded afresh for every loss evaluation: each operation returns a
:class:`Node` holding its value and a closure that maps the output gradient to
input gradients. :func:`backward` walks the graph in reverse topological order
and collects gradients for parameter leaves created by :meth:`ParamStore.leaf`.
"""

from __future__ import annotations

import builtins
import math
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)

__all__ = [
    "Node",
    "ParamStore",
    "ShapeError",
    "NonFiniteGradientError",
    "constant",
    "primitive_forward",
    "affine",
    "tanh",
    "swish",
    "softplus",
    "sigmoid",
    "exp",
    "log",
    "sin",
    "cos",
    "square",
    "sum",
    "mean",
    "concat",
    "slice",
    "repeat",
    "reshape",
    "gaussian_nll",
    "diag_gaussian_kl",
    "backward",
    "adam_step",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not fit an operation's contract."""


class NonFiniteGradientError(FloatingPointError):
    pass


class Node:
    """A value in the recorded graph.

    ``parents`` are the input nodes; ``backward_fn`` maps the gradient of the
    output to a tuple with one gradient (or None) per parent.
    """

    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "param")
    # make ndarray (op) Node defer to Node's reflected operators
    __array_ufunc__ = None

    def __init__(self, value, parents=(), backward_fn=None, op="const", param=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"

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
        return mul(self, -1.0)

    def __getitem__(self, index):
        return slice(self, index)


def constant(value) -> Node:
    return value if isinstance(value, Node) else Node(value)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _needs_grad(node: Node) -> bool:
    return node.param is not None or node.backward_fn is not None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op, *arrays):
    try:
        return np.broadcast_shapes(*(a.shape for a in arrays))
    except ValueError:
        shapes = ", ".join(str(a.shape) for a in arrays)
        raise ShapeError(f"{op}: incompatible shapes {shapes}") from None


# --- elementwise binary ---------------------------------------------------


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _check_broadcast("add", a.value, b.value)
    sa, sb = a.shape, b.shape
    return Node(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _check_broadcast("sub", a.value, b.value)
    sa, sb = a.shape, b.shape
    return Node(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _check_broadcast("mul", a.value, b.value)
    av, bv = a.value, b.value
    return Node(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        "mul",
    )


def div(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _check_broadcast("div", a.value, b.value)
    av, bv = a.value, b.value
    out = av / bv
    return Node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
        "div",
    )


# --- elementwise unary ----------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def tanh(x) -> Node:
    x = _as_node(x)
    y = np.tanh(x.value)
    return Node(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x) -> Node:
    x = _as_node(x)
    y = _sigmoid(x.value)
    return Node(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def swish(x) -> Node:
    x = _as_node(x)
    s = _sigmoid(x.value)
    y = x.value * s
    return Node(y, (x,), lambda g: (g * (s + y * (1.0 - s)),), "swish")


def softplus(x) -> Node:
    x = _as_node(x)
    return Node(_softplus(x.value), (x,), lambda g: (g * _sigmoid(x.value),), "softplus")


def exp(x) -> Node:
    x = _as_node(x)
    y = np.exp(x.value)
    return Node(y, (x,), lambda g: (g * y,), "exp")


def log(x) -> Node:
    x = _as_node(x)
    return Node(np.log(x.value), (x,), lambda g: (g / x.value,), "log")


def sin(x) -> Node:
    x = _as_node(x)
    return Node(np.sin(x.value), (x,), lambda g: (g * np.cos(x.value),), "sin")


def cos(x) -> Node:
    x = _as_node(x)
    return Node(np.cos(x.value), (x,), lambda g: (-g * np.sin(x.value),), "cos")


def square(x) -> Node:
    x = _as_node(x)
    return Node(x.value * x.value, (x,), lambda g: (2.0 * g * x.value,), "square")


# --- reductions and structure ---------------------------------------------


def sum(x, axis=None) -> Node:  # noqa: A001 - mirrors numpy naming
    x = _as_node(x)
    shape = x.shape
    out = x.value.sum(axis=axis)

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Node(out, (x,), grad_fn, "sum")


def mean(x, axis=None) -> Node:
    x = _as_node(x)
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis), 1.0 / float(n))


def concat(nodes: Sequence, axis: int = -1) -> Node:
    nodes = [_as_node(n) for n in nodes]
    if not nodes:
        raise ShapeError("concat: no inputs")
    ndim = nodes[0].value.ndim
    ax = axis % ndim if ndim else 0
    for n in nodes:
        other = [s for i, s in enumerate(n.shape) if i != ax]
        ref = [s for i, s in enumerate(nodes[0].shape) if i != ax]
        if n.value.ndim != ndim or other != ref:
            shapes = ", ".join(str(m.shape) for m in nodes)
            raise ShapeError(f"concat(axis={axis}): incompatible shapes {shapes}")
    sizes = [n.shape[ax] for n in nodes]
    bounds = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(nodes))
        )

    return Node(np.concatenate([n.value for n in nodes], axis=ax), tuple(nodes), grad_fn, "concat")


def slice(x, index) -> Node:  # noqa: A001
    x = _as_node(x)
    shape = x.shape
    try:
        out = x.value[index]
    except IndexError as exc:
        raise ShapeError(f"slice: index {index!r} invalid for shape {shape}") from exc

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (int, type(Ellipsis), type(None), builtins.slice)) for p in parts)

    def grad_fn(g):
        full = np.zeros(shape)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Node(out, (x,), grad_fn, "slice")


def reshape(x, shape) -> Node:
    x = _as_node(x)
    old = x.shape
    return Node(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def repeat(x, repeats: int, axis: int) -> Node:
    """``np.repeat`` along ``axis``; backward sums each repeated group."""
    x = _as_node(x)
    shape = x.shape
    ax = axis % x.value.ndim

    def grad_fn(g):
        new_shape = shape[:ax] + (shape[ax], repeats) + shape[ax + 1 :]
        return (g.reshape(new_shape).sum(axis=ax + 1),)

    return Node(np.repeat(x.value, repeats, axis=ax), (x,), grad_fn, "repeat")


def affine(x, weight, bias) -> Node:
    """``x @ weight + bias``.

    Works for plain matrices (x: (N, i), weight: (i, o), bias: (o,) or (1, o))
    and for stacked ensembles (x: (K, N, i), weight: (K, i, o), bias: (K, 1, o)).
    """
    x, weight, bias = _as_node(x), _as_node(weight), _as_node(bias)
    xv, wv = x.value, weight.value
    if xv.ndim < 2 or wv.ndim < 2 or xv.shape[-1] != wv.shape[-2]:
        raise ShapeError(f"affine: x {xv.shape} incompatible with weight {wv.shape}")
    if wv.ndim == 3 and (xv.ndim != 3 or xv.shape[0] != wv.shape[0]):
        raise ShapeError(f"affine: x {xv.shape} incompatible with stacked weight {wv.shape}")
    out = np.matmul(xv, wv)
    try:
        np.broadcast_shapes(out.shape, bias.shape)
    except ValueError:
        raise ShapeError(f"affine: bias {bias.shape} incompatible with output {out.shape}") from None
    if np.broadcast_shapes(out.shape, bias.shape) != out.shape:
        raise ShapeError(f"affine: bias {bias.shape} incompatible with output {out.shape}")
    out = out + bias.value
    bshape = bias.shape
    need_x, need_w = _needs_grad(x), _needs_grad(weight)

    def grad_fn(g):
        gx = np.matmul(g, np.swapaxes(wv, -1, -2)) if need_x else None
        gw = None
        if need_w:
            gw = np.matmul(np.swapaxes(xv, -1, -2), g)
            if wv.ndim == 2 and gw.ndim > 2:
                gw = gw.reshape(-1, *wv.shape).sum(axis=0)
        return gx, gw, _unbroadcast(g, bshape)

    return Node(out, (x, weight, bias), grad_fn, "affine")


_PRIMITIVES: dict[str, Callable[..., Node]] = {
    "affine": affine,
    "tanh": tanh,
    "swish": swish,
    "softplus": softplus,
    "exp": exp,
    "sum": sum,
    "mean": mean,
    "concat": lambda *xs, axis=-1: concat(xs, axis=axis),
    "slice": slice,
}


def primitive_forward(op_kind: str, *inputs, **kwargs) -> Node:
    """Dispatch one of the named primitives by string."""
    try:
        fn = _PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown primitive {op_kind!r}; expected one of {sorted(_PRIMITIVES)}")
    return fn(*inputs, **kwargs)


# --- probabilistic losses --------------------------------------------------


def gaussian_nll(target, mean, log_var) -> Node:
    """Negative log density of a diagonal Gaussian, summed over all elements."""
    y = target.value if isinstance(target, Node) else np.asarray(target, dtype=np.float64)
    mean, log_var = _as_node(mean), _as_node(log_var)
    if not (y.shape == mean.shape == log_var.shape):
        raise ShapeError(
            f"gaussian_nll: target {y.shape}, mean {mean.shape}, log_var {log_var.shape} differ"
        )
    diff = y - mean.value
    inv_var = np.exp(-log_var.value)
    sq = diff * diff * inv_var
    value = 0.5 * np.sum(sq + log_var.value + LOG_2PI)

    def grad_fn(g):
        return -g * diff * inv_var, 0.5 * g * (1.0 - sq)

    return Node(value, (mean, log_var), grad_fn, "gaussian_nll")


def diag_gaussian_kl(mean_q, log_var_q, mean_p, log_var_p) -> Node:
    """KL(q || p) for diagonal Gaussians, summed over all elements."""
    mean_q, log_var_q = _as_node(mean_q), _as_node(log_var_q)
    mp = np.asarray(mean_p, dtype=np.float64)
    lvp = np.asarray(log_var_p, dtype=np.float64)
    if not (mean_q.shape == log_var_q.shape == mp.shape == lvp.shape):
        raise ShapeError(
            "diag_gaussian_kl: shapes "
            f"{mean_q.shape}, {log_var_q.shape}, {mp.shape}, {lvp.shape} differ"
        )
    diff = mean_q.value - mp
    inv_vp = np.exp(-lvp)
    ratio = np.exp(log_var_q.value - lvp)
    value = 0.5 * np.sum(lvp - log_var_q.value + ratio + diff * diff * inv_vp - 1.0)

    def grad_fn(g):
        return g * diff * inv_vp, 0.5 * g * (ratio - 1.0)

    return Node(max(float(value), 0.0), (mean_q, log_var_q), grad_fn, "diag_gaussian_kl")


# --- parameters, backward, optimizer ---------------------------------------


class ParamStore:
    """Named float64 parameters with Adam moment accumulators."""

    def __init__(self, name: str = "params"):
        self.name = name
        self.values: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}
        self.step = 0

    def add(self, key: str, value) -> None:
        if key in self.values:
            raise KeyError(f"parameter {key!r} already exists in {self.name}")
        arr = np.array(value, dtype=np.float64)
        self.values[key] = arr
        self.m[key] = np.zeros_like(arr)
        self.v[key] = np.zeros_like(arr)
        self.t[key] = 0

    def __getitem__(self, key: str) -> np.ndarray:
        return self.values[key]

    def __contains__(self, key: str) -> bool:
        return key in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def leaf(self, key: str) -> Node:
        return Node(self.values[key], op="param", param=(self, key))

    def set(self, key: str, value) -> None:
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self.values[key].shape:
            raise ShapeError(f"{self.name}/{key}: shape {arr.shape} != {self.values[key].shape}")
        self.values[key][...] = arr

    def reset_moments(self, keys: Iterable[str] | None = None) -> None:
        for key in self.values if keys is None else keys:
            self.m[key][...] = 0.0
            self.v[key][...] = 0.0
            self.t[key] = 0

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for key in sorted(self.values):
            h.update(key.encode())
            h.update(np.ascontiguousarray(self.values[key]).tobytes())
        return h.hexdigest()

    def copy(self, name: str | None = None) -> "ParamStore":
        other = ParamStore(self.name if name is None else name)
        for key, val in self.values.items():
            other.values[key] = val.copy()
            other.m[key] = self.m[key].copy()
            other.v[key] = self.v[key].copy()
            other.t[key] = self.t[key]
        other.step = self.step
        return other


def _toposort(root: Node) -> list[Node]:
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node, params):
    """Reverse-mode sweep from a scalar ``root``.

    ``params`` is a ParamStore or a sequence of them. Returns ``{key: grad}``
    for a single store, or ``{store.name: {key: grad}}`` for a sequence. Every
    parameter of every store gets an entry; unreachable ones are zero.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    single = isinstance(params, ParamStore)
    stores = [params] if single else list(params)
    tables = {id(s): {k: np.zeros_like(v) for k, v in s.values.items()} for s in stores}

    order = _toposort(root)
    grads = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.param is not None:
            store, key = node.param
            table = tables.get(id(store))
            if table is not None:
                table[key] += g
            continue
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or (parent.backward_fn is None and parent.param is None):
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    if single:
        return tables[id(params)]
    return {s.name: tables[id(s)] for s in stores}


def adam_step(
    params: ParamStore,
    gradients: dict[str, np.ndarray],
    learning_rate: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    """One in-place Adam update of the parameters named in ``gradients``."""
    if learning_rate <= 0:
        raise ValueError(f"learning_rate must be positive, got {learning_rate}")
    for key, g in gradients.items():
        if key not in params.values:
            raise KeyError(f"gradient for unknown parameter {key!r} in {params.name}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {params.name}/{key}")
    for key, g in gradients.items():
        m, v = params.m[key], params.v[key]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params.t[key] += 1
        t = params.t[key]
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        params.values[key] -= learning_rate * m_hat / (np.sqrt(v_hat) + eps)
    params.step += 1
    return params
