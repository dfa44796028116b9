"""
Minimal reverse-mode automatic differentiation over numpy arrays.

Values are float64 ``np.ndarray`` objects. Every operation returns a
:class:`Node` that remembers its parents and a backward rule mapping the
output adjoint to one adjoint per parent. :func:`backward` walks the graph
in reverse topological order.

Broadcasting is deliberately narrow: elementwise binary ops accept either
equal shapes or a scalar on one side. Anything else (bias rows, repeated
encodings) goes through the explicit :func:`repeat` op.

Leaf adjoints accumulate across calls to :func:`backward`; intermediate
adjoints are recomputed each call. Running ``backward`` twice on the same
graph without :func:`zero_grad` therefore doubles every leaf ``grad``.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Node", "constant", "parameter", "backward", "zero_grad", "grad_check",
    "add", "sub", "mul", "div", "neg", "scale", "exp", "log", "tanh",
    "sigmoid", "softplus", "logaddexp", "matmul", "sum", "getitem", "stack",
    "concat", "reshape", "repeat", "where", "add_rows", "lstm_cell", "elementwise",
]


class Node:
    """A value in the computation graph together with its adjoint."""

    __slots__ = ("value", "grad", "parents", "rule", "op", "requires_grad")

    def __init__(self, value, parents: tuple["Node", ...] = (),
                 rule: Callable | None = None, op: str = "leaf",
                 requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        # interior adjoints are allocated by backward()
        self.grad = None if parents else np.zeros_like(self.value)
        self.parents = parents
        self.rule = rule
        self.op = op
        if not requires_grad:
            for p in parents:
                if p.requires_grad:
                    requires_grad = True
                    break
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape})"

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

    def __getitem__(self, index):
        return getitem(self, index)


def constant(value) -> Node:
    return Node(value)


def parameter(value) -> Node:
    return Node(np.array(value, dtype=np.float64), requires_grad=True)


def _lift(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _check_binary(a: Node, b: Node, op: str):
    if a.shape != b.shape and a.value.ndim > 0 and b.value.ndim > 0:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Only the scalar-vs-tensor case needs reducing.
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _binary(a, b, op, fwd, rule) -> Node:
    a, b = _lift(a), _lift(b)
    _check_binary(a, b, op)
    out = fwd(a.value, b.value)

    def backward_rule(g):
        ga, gb = rule(g, a.value, b.value, out)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Node(out, (a, b), backward_rule, op)


def add(a, b) -> Node:
    return _binary(a, b, "add", np.add, lambda g, x, y, o: (g, g))


def sub(a, b) -> Node:
    return _binary(a, b, "sub", np.subtract, lambda g, x, y, o: (g, -g))


def mul(a, b) -> Node:
    return _binary(a, b, "mul", np.multiply, lambda g, x, y, o: (g * y, g * x))


def div(a, b) -> Node:
    return _binary(a, b, "div", np.divide,
                   lambda g, x, y, o: (g / y, -g * x / (y * y)))


def logaddexp(a, b) -> Node:
    """Stable ``log(exp(a) + exp(b))``."""
    def rule(g, x, y, o):
        return g * np.exp(x - o), g * np.exp(y - o)
    return _binary(a, b, "logaddexp", np.logaddexp, rule)


def _unary(x, op, fwd, rule) -> Node:
    x = _lift(x)
    out = fwd(x.value)
    return Node(out, (x,), lambda g: (rule(g, x.value, out),), op)


def neg(x) -> Node:
    return _unary(x, "neg", np.negative, lambda g, v, o: -g)


def scale(x, c: float) -> Node:
    c = float(c)
    return _unary(x, "scale", lambda v: c * v, lambda g, v, o: c * g)


def exp(x) -> Node:
    return _unary(x, "exp", np.exp, lambda g, v, o: g * o)


def log(x) -> Node:
    x = _lift(x)
    if np.any(x.value <= 0):
        raise ValueError("log of non-positive value")
    return _unary(x, "log", np.log, lambda g, v, o: g / v)


def tanh(x) -> Node:
    return _unary(x, "tanh", np.tanh, lambda g, v, o: g * (1.0 - o * o))


def sigmoid(x) -> Node:
    return _unary(x, "sigmoid", expit, lambda g, v, o: g * o * (1.0 - o))


def softplus(x) -> Node:
    return _unary(x, "softplus", lambda v: np.logaddexp(0.0, v),
                  lambda g, v, o: g * expit(v))


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
    "exp": exp, "log": log, "tanh": tanh, "sigmoid": sigmoid,
    "softplus": softplus, "logaddexp": logaddexp, "scale": scale,
}


def elementwise(op: str, *inputs) -> Node:
    """Dispatch an elementwise primitive by name (``"scale"`` takes ``(x, c)``)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs)


def matmul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return Node(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def sum(x, axis: int | None = None) -> Node:  # noqa: A001 - mirrors np.sum
    x = _lift(x)
    shape = x.shape

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Node(np.sum(x.value, axis=axis), (x,), rule, "sum")


def getitem(x, index) -> Node:
    """Basic (slice / integer) indexing."""
    x = _lift(x)

    def rule(g):
        out = np.zeros_like(x.value)
        out[index] = g
        return (out,)

    return Node(x.value[index], (x,), rule, "getitem")


def stack(nodes: Sequence, axis: int = 0) -> Node:
    nodes = tuple(_lift(n) for n in nodes)
    value = np.stack([n.value for n in nodes], axis=axis)

    def rule(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(nodes)))

    return Node(value, nodes, rule, "stack")


def concat(nodes: Sequence, axis: int = -1) -> Node:
    nodes = tuple(_lift(n) for n in nodes)
    value = np.concatenate([n.value for n in nodes], axis=axis)
    bounds = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Node(value, nodes, rule, "concat")


def reshape(x, shape: tuple[int, ...]) -> Node:
    x = _lift(x)
    old = x.shape
    return Node(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def repeat(x, n: int, axis: int = 0) -> Node:
    """Insert a new ``axis`` and tile ``x`` ``n`` times along it."""
    x = _lift(x)
    value = np.repeat(np.expand_dims(x.value, axis), n, axis=axis)
    return Node(value, (x,), lambda g: (g.sum(axis=axis),), "repeat")


def where(cond, a, b) -> Node:
    """Select ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    cond = np.asarray(cond, dtype=bool)
    a, b = _lift(a), _lift(b)
    _check_binary(a, b, "where")
    if a.shape != cond.shape and a.value.ndim > 0:
        raise ValueError(f"where: condition shape {cond.shape} vs {a.shape}")

    def rule(g):
        return (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                _unbroadcast(np.where(cond, 0.0, g), b.shape))

    return Node(np.where(cond, a.value, b.value), (a, b), rule, "where")


def add_rows(x, b) -> Node:
    """``x`` (n, k) plus the row vector ``b`` (k,) on every row."""
    x, b = _lift(x), _lift(b)
    if x.value.ndim != 2 or b.shape != x.shape[1:]:
        raise ValueError(f"add_rows: shapes {x.shape} and {b.shape}")
    return Node(x.value + b.value, (x, b), lambda g: (g, g.sum(axis=0)), "add_rows")


def lstm_cell(z, h_prev, c_prev, keep=None) -> Node:
    """Fused LSTM state update from gate pre-activations.

    ``z`` is (B, 4H) in gate order input, forget, cell, output. Returns the
    (B, 2H) node ``[h, c]``. Rows where the constant ``keep`` (B,) is False
    pass ``(h_prev, c_prev)`` through unchanged.
    """
    z, h_prev, c_prev = _lift(z), _lift(h_prev), _lift(c_prev)
    H = c_prev.shape[1]
    if z.shape != (c_prev.shape[0], 4 * H) or h_prev.shape != c_prev.shape:
        raise ValueError(f"lstm_cell: shapes {z.shape}, {h_prev.shape}, {c_prev.shape}")
    zv, cp = z.value, c_prev.value
    i = expit(zv[:, :H])
    f = expit(zv[:, H:2 * H])
    gg = np.tanh(zv[:, 2 * H:3 * H])
    o = expit(zv[:, 3 * H:])
    c = f * cp + i * gg
    tc = np.tanh(c)
    h = o * tc
    if keep is None:
        rows = np.ones((cp.shape[0], 1), dtype=bool)
    else:
        rows = np.asarray(keep, dtype=bool).reshape(-1, 1)
    value = np.concatenate([np.where(rows, h, h_prev.value), np.where(rows, c, cp)], axis=1)

    def rule(g):
        gh, gc = g[:, :H], g[:, H:]
        gh_new, gc_new = np.where(rows, gh, 0.0), np.where(rows, gc, 0.0)
        dc = gc_new + gh_new * o * (1.0 - tc * tc)
        dz = np.concatenate([dc * gg * i * (1.0 - i), dc * cp * f * (1.0 - f),
                             dc * i * (1.0 - gg * gg), gh_new * tc * o * (1.0 - o)], axis=1)
        return dz, np.where(rows, 0.0, gh), np.where(rows, dc * f, gc)

    return Node(value, (z, h_prev, c_prev), rule, "lstm_cell")


def _topological(root: Node) -> list[Node]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack_.append((p, False))
    return order


def backward(root: Node) -> dict[int, np.ndarray]:
    """Propagate adjoints from a scalar ``root`` to every reachable node.

    Returns a map from ``id(leaf)`` to that leaf's accumulated gradient.
    """
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topological(root)
    for node in order:
        if not node.is_leaf:
            node.grad = np.zeros_like(node.value)
    seed = np.ones_like(root.value)
    if root.is_leaf:
        root.grad = root.grad + seed
    else:
        root.grad = seed
    for node in reversed(order):
        if node.is_leaf:
            continue
        for parent, g in zip(node.parents, node.rule(node.grad)):
            if parent.requires_grad:
                parent.grad = parent.grad + g
    return {id(n): n.grad for n in order if n.is_leaf}


def zero_grad(params: Iterable[Node]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.value)


def grad_check(f: Callable[[], Node], params: Sequence[Node], step: float = 1e-6,
               tolerance: float = 1e-4, floor: float = 1e-6, stencil: int = 2) -> dict:
    """Compare analytic gradients of ``f()`` with central differences.

    ``f`` rebuilds the graph from the current parameter values on each call.
    Relative error per element is ``|a - n| / max(|a|, |n|, floor)``.
    ``stencil=4`` uses the fourth-order five-point formula, which tolerates
    a larger ``step`` and so loses far less to rounding on large losses.

    Returns
    -------
    dict
        ``errors`` (one array per parameter), ``max_error`` and ``passed``.
        Failures are reported, never raised.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if stencil == 2:
        offsets = {1: 0.5, -1: -0.5}
    elif stencil == 4:
        offsets = {2: -1 / 12, 1: 8 / 12, -1: -8 / 12, -2: 1 / 12}
    else:
        raise ValueError("stencil must be 2 or 4")
    zero_grad(params)
    backward(f())
    analytic = [p.grad.copy() for p in params]
    errors = []
    for p, a in zip(params, analytic):
        numeric = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            vals = {}
            for k in offsets:
                flat[i] = orig + k * step
                vals[k] = float(f().value)
            flat[i] = orig
            numeric.reshape(-1)[i] = math.fsum(c * vals[k] for k, c in offsets.items()) / step
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        errors.append(np.abs(a - numeric) / denom)
    max_error = max((float(e.max()) for e in errors if e.size), default=0.0)
    return {"errors": errors, "max_error": max_error, "passed": max_error < tolerance,
            "analytic": analytic}
