"""Small reverse-mode differentiation engine over float64 numpy arrays.

Graphs are built eagerly (define-by-run): every operation on a :class:`Node`
computes its value immediately and remembers how to pull a cotangent back to
its inputs. The pullbacks are themselves written with ``Node`` operations, so
calling :func:`grad` with ``create_graph=True`` yields gradients that can be
differentiated again. That is all MAML needs to differentiate through an
unrolled inner loop.

Example::

    theta = ParameterSet({"w": np.array([3.0])})
    leaves = theta.leaves()
    loss = (leaves["w"] * leaves["w"]).sum()
    grad(loss, leaves)["w"]        # array([6.])
"""

from __future__ import annotations

from collections.abc import Callable, Iterator, Mapping
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AdamState",
    "FlatAdam",
    "DiffError",
    "Node",
    "NonFiniteError",
    "ParameterSet",
    "adam_step",
    "as_node",
    "concat",
    "const",
    "dropout",
    "exp",
    "forward",
    "grad",
    "grad_through_update",
    "hinge",
    "leaf",
    "linear",
    "log",
    "relu",
    "select",
    "sgd_step",
    "sigmoid",
    "softmax",
    "softplus",
    "square",
]


class DiffError(ValueError):
    """Raised for malformed graphs, shape errors and key mismatches."""


class NonFiniteError(FloatingPointError):
    """A forward or backward value contained NaN or Inf."""

    def __init__(self, op: str):
        super().__init__(f"non-finite value produced by op '{op}'")
        self.op = op


# ---------------------------------------------------------------------------
# Nodes
# ---------------------------------------------------------------------------


class Node:
    """A value in the computation graph.

    ``vjp(g, out, *inputs)`` returns one cotangent per input (or ``None``),
    built from graph operations so it can be differentiated again. ``fast``
    is the same pullback on raw arrays, used when no graph is needed.
    """

    __slots__ = ("value", "parents", "vjp", "fast", "requires_grad", "op", "_detached")
    __array_priority__ = 100.0

    def __init__(self, value, parents=(), vjp=None, requires_grad=False, op="leaf", fast=None):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.fast = fast
        self.requires_grad = requires_grad
        self.op = op
        self._detached = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def detach(self) -> Node:
        if self._detached is None:
            self._detached = Node(self.value, op="const")
        return self._detached

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else _not_scalar()

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, index):
        return select(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _not_scalar():
    raise DiffError("item() requires a single-element node")


def _arr(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def const(value) -> Node:
    """Wrap a value as a constant (never receives a gradient)."""
    return Node(_arr(value), op="const")


def leaf(value, requires_grad: bool = True) -> Node:
    return Node(np.asarray(value, dtype=np.float64), requires_grad=requires_grad, op="leaf")


def as_node(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def _make(op: str, value: np.ndarray, parents: tuple, vjp, fast=None) -> Node:
    if not _finite(value):
        raise NonFiniteError(op)
    for p in parents:
        if p.requires_grad:
            return Node(value, parents, vjp, True, op, fast)
    return Node(value, op=op)


def _finite(value: np.ndarray) -> bool:
    return bool(np.isfinite(value).all())


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes, lead = _reduced_axes(g.shape, shape)
    g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape) if lead else g


# ---------------------------------------------------------------------------
# Broadcast plumbing
# ---------------------------------------------------------------------------


def _reduced_axes(shape: tuple, target: tuple) -> tuple[tuple[int, ...], int]:
    lead = len(shape) - len(target)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, d in enumerate(target) if d == 1 and shape[i + lead] != 1
    )
    return axes, lead


def sum_to(x: Node, shape: tuple) -> Node:
    """Sum ``x`` down to a broadcast-compatible ``shape``."""
    if x.shape == shape:
        return x

    def vjp(g, out, a):
        return (broadcast_to(g, a.shape),)

    def fast(g, out, a):
        return (np.broadcast_to(g, a.shape),)

    return _make("sum_to", _unbroadcast(x.value, shape), (x,), vjp, fast)


def broadcast_to(x: Node, shape: tuple) -> Node:
    if x.shape == shape:
        return x
    value = np.broadcast_to(x.value, shape).copy()

    def vjp(g, out, a):
        return (sum_to(g, a.shape),)

    def fast(g, out, a):
        return (_unbroadcast(g, a.shape),)

    return _make("broadcast", value, (x,), vjp, fast)


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def vjp(g, out, x, y):
        return sum_to(g, x.shape), sum_to(g, y.shape)

    def fast(g, out, x, y):
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    return _make("add", a.value + b.value, (a, b), vjp, fast)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def vjp(g, out, x, y):
        return sum_to(g, x.shape), sum_to(neg(g), y.shape)

    def fast(g, out, x, y):
        return _unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)

    return _make("sub", a.value - b.value, (a, b), vjp, fast)


def neg(a) -> Node:
    a = as_node(a)

    def vjp(g, out, x):
        return (neg(g),)

    def fast(g, out, x):
        return (-g,)

    return _make("neg", -a.value, (a,), vjp, fast)


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def vjp(g, out, x, y):
        return sum_to(mul(g, y), x.shape), sum_to(mul(g, x), y.shape)

    def fast(g, out, x, y):
        return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)

    return _make("mul", a.value * b.value, (a, b), vjp, fast)


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def vjp(g, out, x, y):
        gx = sum_to(div(g, y), x.shape)
        gy = sum_to(neg(mul(g, div(out, y))), y.shape)
        return gx, gy

    def fast(g, out, x, y):
        return _unbroadcast(g / y, x.shape), _unbroadcast(-g * out / y, y.shape)

    with np.errstate(divide="ignore", invalid="ignore"):
        value = a.value / b.value
    return _make("div", value, (a, b), vjp, fast)


def power(a, p: float) -> Node:
    a = as_node(a)
    p = float(p)

    def vjp(g, out, x):
        return (mul(g, mul(p, power(x, p - 1.0))),)

    def fast(g, out, x):
        return (g * p * x ** (p - 1.0),)

    with np.errstate(divide="ignore", invalid="ignore"):
        value = a.value**p
    return _make("pow", value, (a,), vjp, fast)


def square(a) -> Node:
    a = as_node(a)

    def vjp(g, out, x):
        return (mul(g, mul(2.0, x)),)

    def fast(g, out, x):
        return (2.0 * g * x,)

    return _make("square", a.value * a.value, (a,), vjp, fast)


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DiffError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def vjp(g, out, x, y):
        return matmul(g, transpose(y)), matmul(transpose(x), g)

    need_a, need_b = a.requires_grad, b.requires_grad

    def fast(g, out, x, y):
        return (g @ y.T if need_a else None), (x.T @ g if need_b else None)

    return _make("matmul", a.value @ b.value, (a, b), vjp, fast)


def linear(x, w, b) -> Node:
    """``x @ w + b`` as one node; ``x`` is ``(n, in)``, ``w`` ``(in, out)``, ``b`` ``(out,)``."""
    x, w, b = as_node(x), as_node(w), as_node(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DiffError(f"linear shape mismatch: {x.shape} @ {w.shape} + {b.shape}")

    def vjp(g, out, xx, ww, bb):
        return matmul(g, transpose(ww)), matmul(transpose(xx), g), sum_(g, axis=0)

    need_x = x.requires_grad

    def fast(g, out, xx, ww, bb):
        return (g @ ww.T if need_x else None), xx.T @ g, g.sum(axis=0)

    return _make("linear", x.value @ w.value + b.value, (x, w, b), vjp, fast)


def transpose(a) -> Node:
    a = as_node(a)

    def vjp(g, out, x):
        return (transpose(g),)

    def fast(g, out, x):
        return (g.T,)

    return _make("transpose", a.value.T.copy(), (a,), vjp, fast)


def reshape(a, shape) -> Node:
    a = as_node(a)

    def vjp(g, out, x):
        return (reshape(g, x.shape),)

    def fast(g, out, x):
        return (g.reshape(x.shape),)

    return _make("reshape", a.value.reshape(shape), (a,), vjp, fast)


def relu(a) -> Node:
    a = as_node(a)
    mask = (a.value > 0).astype(np.float64)

    def vjp(g, out, x):
        return (mul(g, mask),)

    def fast(g, out, x):
        return (g * mask,)

    return _make("relu", a.value * mask, (a,), vjp, fast)


def hinge(a, margin=0.0) -> Node:
    """``max(a - margin, 0)``; the margin may itself be a node."""
    return relu(sub(a, margin))


def exp(a) -> Node:
    a = as_node(a)

    def vjp(g, out, x):
        return (mul(g, out),)

    def fast(g, out, x):
        return (g * out,)

    with np.errstate(over="ignore"):
        value = np.exp(a.value)
    return _make("exp", value, (a,), vjp, fast)


def log(a) -> Node:
    a = as_node(a)

    def vjp(g, out, x):
        return (div(g, x),)

    def fast(g, out, x):
        return (g / x,)

    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(a.value)
    return _make("log", value, (a,), vjp, fast)


def sigmoid(a) -> Node:
    a = as_node(a)

    def vjp(g, out, x):
        return (mul(g, mul(out, sub(1.0, out))),)

    def fast(g, out, x):
        return (g * out * (1.0 - out),)

    return _make("sigmoid", 0.5 * (1.0 + np.tanh(0.5 * a.value)), (a,), vjp, fast)


def softplus(a) -> Node:
    a = as_node(a)

    def vjp(g, out, x):
        return (mul(g, sigmoid(x)),)

    def fast(g, out, x):
        return (g * 0.5 * (1.0 + np.tanh(0.5 * x)),)

    return _make("softplus", np.logaddexp(0.0, a.value), (a,), vjp, fast)


def softmax(a, axis: int = -1) -> Node:
    a = as_node(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=axis, keepdims=True)

    def vjp(g, out, x):
        inner = sum_(mul(g, out), axis=axis, keepdims=True)
        return (mul(out, sub(g, inner)),)

    def fast(g, out, x):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", value, (a,), vjp, fast)


def _keepdims_shape(shape: tuple, axis) -> tuple:
    if axis is None:
        return (1,) * len(shape)
    axes = {a % len(shape) for a in np.atleast_1d(axis).tolist()}
    return tuple(1 if i in axes else d for i, d in enumerate(shape))


def sum_(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    value = np.asarray(a.value.sum(axis=axis, keepdims=keepdims), dtype=np.float64)
    kshape = _keepdims_shape(a.shape, axis)

    def vjp(g, out, x):
        return (broadcast_to(reshape(g, kshape), x.shape),)

    def fast(g, out, x):
        return (np.broadcast_to(g.reshape(kshape), x.shape),)

    return _make("sum", value, (a,), vjp, fast)


def mean(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def concat(nodes, axis: int = 0) -> Node:
    nodes = tuple(as_node(n) for n in nodes)
    sizes = [n.shape[axis] for n in nodes]
    bounds = np.cumsum([0] + sizes)
    ndim = nodes[0].ndim
    ax = axis % ndim
    slices = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        idx = [slice(None)] * ndim
        idx[ax] = slice(int(lo), int(hi))
        slices.append(tuple(idx))

    def vjp(g, out, *xs):
        return tuple(select(g, s) for s in slices)

    def fast(g, out, *xs):
        return tuple(g[s] for s in slices)

    return _make("concat", np.concatenate([n.value for n in nodes], axis=axis), nodes, vjp, fast)


def select(a, index) -> Node:
    """Basic or integer-array indexing."""
    a = as_node(a)
    if isinstance(index, Node):
        raise DiffError("index must be a constant")

    def vjp(g, out, x):
        return (_scatter(g, index, x.shape),)

    def fast(g, out, x):
        full = np.zeros(x.shape)
        np.add.at(full, index, g)
        return (full,)

    return _make("select", np.asarray(a.value[index], dtype=np.float64), (a,), vjp, fast)


def _scatter(g: Node, index, shape: tuple) -> Node:
    value = np.zeros(shape)
    np.add.at(value, index, g.value)

    def vjp(h, out, y):
        return (select(h, index),)

    def fast(h, out, y):
        return (np.asarray(h[index], dtype=np.float64),)

    return _make("scatter", value, (g,), vjp, fast)


def dropout(a, rate: float, seed) -> Node:
    """Inverted dropout; identity at rate 0.

    ``seed`` is anything ``np.random.default_rng`` accepts, or a Generator to draw from.
    """
    a = as_node(a)
    if rate <= 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise DiffError(f"dropout rate must be in [0, 1), got {rate}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    keep = rng.random(a.shape) >= rate
    return mul(a, keep / (1.0 - rate))


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def _topo_order(root: Node, stop: set[int]) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
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
        if id(node) in stop:
            continue
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node, wrt: list[Node], create_graph: bool = False) -> list[Node | None]:
    if loss.size != 1:
        raise DiffError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return [None] * len(wrt)
    stop = {id(w) for w in wrt}
    order = reversed(_topo_order(loss, stop))
    if create_graph:
        grads = _pull_graph(order, stop, loss)
    else:
        grads = _pull_arrays(order, stop, loss)
    out = []
    for w in wrt:
        g = grads.get(id(w))
        if g is not None and not _finite(g.value):
            raise NonFiniteError(f"grad:{w.op}")
        out.append(g)
    return out


# The wrt nodes are treated as inputs in both walkers: their gradient is kept
# and nothing is propagated past them.


def _pull_graph(order, stop: set[int], loss: Node) -> dict[int, Node]:
    grads: dict[int, Node] = {id(loss): const(np.ones_like(loss.value))}
    for node in order:
        if id(node) in stop or not node.parents:
            continue
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for p, c in zip(node.parents, node.vjp(g, node, *node.parents)):
            if c is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = c if prev is None else add(prev, c)
    return grads


def _pull_arrays(order, stop: set[int], loss: Node) -> dict[int, Node]:
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in order:
        if id(node) in stop or not node.parents:
            continue
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.fast is not None:
            contribs = node.fast(g, node.value, *(p.value for p in node.parents))
        else:
            detached = (p.detach() for p in node.parents)
            contribs = [None if c is None else c.value for c in node.vjp(const(g), node.detach(), *detached)]
        for p, c in zip(node.parents, contribs):
            if c is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = c if prev is None else prev + c
    return {k: Node(np.asarray(v, dtype=np.float64), op="const") for k, v in grads.items() if k in stop}


# ---------------------------------------------------------------------------
# Parameter sets
# ---------------------------------------------------------------------------


class ParameterSet(Mapping):
    """Ordered name -> float64 array mapping of trainable values."""

    def __init__(self, entries: Mapping[str, np.ndarray] | None = None, rng_seed: int | None = None):
        self._entries: dict[str, np.ndarray] = {}
        for name, value in (entries or {}).items():
            if name in self._entries:
                raise DiffError(f"duplicate parameter name {name!r}")
            self._entries[name] = np.array(value, dtype=np.float64)
        self.rng_seed = rng_seed

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}:{v.shape}" for k, v in self._entries.items())
        return f"ParameterSet({shapes})"

    @classmethod
    def _wrap(cls, entries: dict[str, np.ndarray], rng_seed: int | None = None) -> ParameterSet:
        # no copy: for freshly computed float64 arrays only
        out = cls.__new__(cls)
        out._entries = entries
        out.rng_seed = rng_seed
        return out

    def clone(self) -> ParameterSet:
        return ParameterSet({k: v.copy() for k, v in self._entries.items()}, self.rng_seed)

    def leaves(self, requires_grad: bool = True) -> dict[str, Node]:
        return {k: leaf(v, requires_grad) for k, v in self._entries.items()}

    def subset(self, names) -> ParameterSet:
        return ParameterSet({k: self._entries[k] for k in names}, self.rng_seed)

    def merged(self, other: Mapping[str, np.ndarray]) -> ParameterSet:
        entries = dict(self._entries)
        entries.update(other)
        return ParameterSet(entries, self.rng_seed)

    def zeros_like(self) -> ParameterSet:
        return ParameterSet({k: np.zeros_like(v) for k, v in self._entries.items()}, self.rng_seed)

    def allclose(self, other: Mapping[str, np.ndarray], atol: float = 0.0, rtol: float = 0.0) -> bool:
        if list(self) != list(other):
            return False
        return all(np.allclose(self[k], other[k], atol=atol, rtol=rtol) for k in self)

    def equals(self, other: Mapping[str, np.ndarray]) -> bool:
        return list(self) == list(other) and all(np.array_equal(self[k], other[k]) for k in self)

    def to_json(self) -> dict:
        return {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()} for k, v in self._entries.items()}

    @classmethod
    def from_json(cls, obj: Mapping, rng_seed: int | None = None) -> ParameterSet:
        return cls({k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in obj.items()}, rng_seed)


def _check_keys(a: Mapping, b: Mapping) -> None:
    if list(a) != list(b):
        raise DiffError(f"parameter key mismatch: {list(a)} vs {list(b)}")


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------


def forward(builder: Callable[[dict[str, Node]], Node], bindings: ParameterSet) -> np.ndarray:
    """Evaluate ``builder`` on constant leaves bound to ``bindings``."""
    return builder(bindings.leaves(requires_grad=False)).value


def grad(loss: Node, wrt: Mapping[str, Node], create_graph: bool = False):
    """Gradient of a scalar ``loss`` with respect to each leaf in ``wrt``.

    Returns a :class:`ParameterSet` of arrays, or a ``dict`` of nodes when
    ``create_graph`` is set. Unused parameters get zeros.
    """
    names = list(wrt)
    gs = backward(loss, [wrt[k] for k in names], create_graph)
    if create_graph:
        return {k: (g if g is not None else const(np.zeros(wrt[k].shape))) for k, g in zip(names, gs)}
    return ParameterSet({k: (g.value.copy() if g is not None else np.zeros(wrt[k].shape)) for k, g in zip(names, gs)})


def grad_through_update(
    meta_loss_builder: Callable[[dict[str, Node]], Node],
    theta: ParameterSet,
    alpha: float,
    n_steps: int,
    mode: str = "second_order",
    inner_loss_builder: Callable[[dict[str, Node], int], Node] | None = None,
) -> ParameterSet:
    """Gradient of the post-adaptation loss with respect to the initial ``theta``.

    The inner loop takes ``n_steps`` plain gradient steps of size ``alpha`` on
    ``inner_loss_builder(params, step)`` (defaults to the meta loss). In
    ``second_order`` mode the steps are taped and differentiated through; in
    ``first_order`` mode the returned gradient is the meta-loss gradient at the
    adapted parameters.
    """
    if n_steps < 0:
        raise DiffError("n_steps must be >= 0")
    if alpha <= 0:
        raise DiffError("alpha must be > 0")
    if mode not in ("second_order", "first_order"):
        raise DiffError(f"unknown mode {mode!r}")
    if inner_loss_builder is None:
        inner_loss_builder = lambda params, step: meta_loss_builder(params)  # noqa: E731

    if mode == "first_order":
        adapted = theta.clone()
        for step in range(n_steps):
            leaves = adapted.leaves()
            g = grad(inner_loss_builder(leaves, step), leaves)
            adapted = sgd_step(adapted, g, alpha)
        leaves = adapted.leaves()
        return grad(meta_loss_builder(leaves), leaves)

    theta_leaves = theta.leaves()
    params: dict[str, Node] = dict(theta_leaves)
    for step in range(n_steps):
        g = grad(inner_loss_builder(params, step), params, create_graph=True)
        params = {k: sub(params[k], mul(g[k], alpha)) for k in params}
    return grad(meta_loss_builder(params), theta_leaves)


def sgd_step(params: ParameterSet, grads: Mapping[str, np.ndarray], lr: float) -> ParameterSet:
    _check_keys(params, grads)
    return ParameterSet._wrap({k: np.asarray(params[k] - lr * grads[k], dtype=np.float64) for k in params}, params.rng_seed)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: ParameterSet,
    grads: Mapping[str, np.ndarray],
    state: AdamState | None = None,
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[ParameterSet, AdamState]:
    _check_keys(params, grads)
    state = state or AdamState()
    b1, b2 = betas
    t = state.t + 1
    c1, c2 = 1 - b1**t, 1 - b2**t
    m, v, out = {}, {}, {}
    for k in params:
        g = grads[k]
        prev_m, prev_v = state.m.get(k), state.v.get(k)
        m[k] = (1 - b1) * g if prev_m is None else b1 * prev_m + (1 - b1) * g
        v[k] = (1 - b2) * g * g if prev_v is None else b2 * prev_v + (1 - b2) * g * g
        out[k] = np.asarray(params[k] - lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + eps), dtype=np.float64)
    return ParameterSet._wrap(out, params.rng_seed), AdamState(m, v, t)


class FlatAdam:
    """Adam over a fixed list of arrays, kept as one flat vector.

    Equivalent to :func:`adam_step` on the same arrays; ``step`` returns fresh
    arrays shaped like the originals.
    """

    def __init__(self, arrays, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.shapes = [np.shape(a) for a in arrays]
        self.sizes = [int(np.prod(s)) for s in self.shapes]
        self.theta = np.concatenate([np.ravel(a) for a in arrays]) if arrays else np.zeros(0)
        self.m = np.zeros_like(self.theta)
        self.v = np.zeros_like(self.theta)
        self.t = 0
        self.lr, self.betas, self.eps = lr, betas, eps

    def step(self, grads) -> list[np.ndarray]:
        b1, b2 = self.betas
        g = np.concatenate([np.ravel(x) for x in grads]) if grads else np.zeros(0)
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * g
        self.v = b2 * self.v + (1 - b2) * g * g
        m_hat = self.m / (1 - b1**self.t)
        v_hat = self.v / (1 - b2**self.t)
        self.theta = self.theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return self.arrays()

    def arrays(self) -> list[np.ndarray]:
        out, start = [], 0
        for shape, size in zip(self.shapes, self.sizes):
            out.append(self.theta[start : start + size].reshape(shape))
            start += size
        return out
