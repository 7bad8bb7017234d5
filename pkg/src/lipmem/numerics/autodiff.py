"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

A :class:`Node` wraps an ``np.ndarray`` value. Operations on nodes record a
backward rule and their parents; :func:`backward` walks the recorded graph in
reverse topological order. Leaf nodes created with ``requires_grad=True``
accumulate gradients in ``.grad`` across calls until :meth:`Node.zero_grad`.

Subgraphs that cannot reach a gradient-requiring leaf are collapsed into
constants at construction time, so frozen branches cost no backward work.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

EPS = 1e-8


class Node:
    __slots__ = ("value", "grad", "op", "parents", "requires_grad", "_backward")

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward_fn: Callable | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = backward_fn
        self.grad = np.zeros_like(self.value) if requires_grad and not parents else None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.value.shape}, requires_grad={self.requires_grad})"

    __array_priority__ = 100

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __neg__(self): return neg(self)
    def __getitem__(self, idx): return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


def parameter(value) -> Node:
    """A trainable leaf; gradients accumulate into ``.grad``."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True)


def constant(value) -> Node:
    return value if isinstance(value, Node) and not value.requires_grad else Node(
        value.value if isinstance(value, Node) else value)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def detach(x) -> Node:
    """Cut the graph: same value, no gradient path."""
    return Node(as_node(x).value)


def _make(value, op: str, parents: Sequence[Node], backward_fn: Callable) -> Node:
    if any(p.requires_grad for p in parents):
        return Node(value, requires_grad=True, op=op, parents=tuple(parents),
                    backward_fn=backward_fn)
    return Node(value, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast(a.value, b.value, "add")
    return _make(a.value + b.value, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast(a.value, b.value, "sub")
    return _make(a.value - b.value, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast(a.value, b.value, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast(a.value, b.value, "div")
    av, bv = a.value, b.value
    out = av / bv
    return _make(out, "div", (a, b),
                 lambda g: (_unbroadcast(g / bv, a.shape), _unbroadcast(-g * out / bv, b.shape)))


def neg(a) -> Node:
    a = as_node(a)
    return _make(-a.value, "neg", (a,), lambda g: (-g,))


# -- linear algebra / shape ----------------------------------------------------

def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _make(av @ bv, "matmul", (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a) -> Node:
    a = as_node(a)
    return _make(a.value.T, "transpose", (a,), lambda g: (g.T,))


def reshape(a, shape) -> Node:
    a = as_node(a)
    old = a.shape
    return _make(a.value.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def getitem(a, idx) -> Node:
    a = as_node(a)

    fancy = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def back(g):
        out = np.zeros_like(a.value)
        if fancy:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return _make(a.value[idx], "getitem", (a,), back)


def concat(nodes: Iterable, axis: int = -1) -> Node:
    nodes = [as_node(n) for n in nodes]
    vals = [n.value for n in nodes]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise ValueError(f"concat: incompatible shapes {[v.shape for v in vals]}") from exc
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _make(out, "concat", nodes, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack_rows(nodes: Sequence) -> Node:
    return concat([reshape(as_node(n), (1, -1)) for n in nodes], axis=0)


# -- reductions ----------------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001 - mirrors numpy
    a = as_node(a)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.value.sum(axis=axis, keepdims=keepdims), "sum", (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# -- elementwise unary -----------------------------------------------------------

def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Node:
    """Natural log. Non-positive inputs are a domain error."""
    a = as_node(a)
    if np.any(a.value <= 0):
        raise ValueError("log: non-positive input")
    av = a.value
    return _make(np.log(av), "log", (a,), lambda g: (g / av,))


def abs(a) -> Node:  # noqa: A001
    a = as_node(a)
    s = np.sign(a.value)  # sign(0) == 0 fixes the subgradient at the kink
    return _make(np.abs(a.value), "abs", (a,), lambda g: (g * s,))


def square(a) -> Node:
    a = as_node(a)
    av = a.value
    return _make(av * av, "square", (a,), lambda g: (2.0 * g * av,))


def tanh(a) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Node:
    a = as_node(a)
    mask = (a.value > 0).astype(np.float64)
    return _make(a.value * mask, "relu", (a,), lambda g: (g * mask,))


def sigmoid(a) -> Node:
    a = as_node(a)
    x = a.value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def clip(a, lo: float, hi: float) -> Node:
    """Clamp to [lo, hi]; gradient is zero where the clamp is active."""
    a = as_node(a)
    mask = ((a.value >= lo) & (a.value <= hi)).astype(np.float64)
    return _make(np.clip(a.value, lo, hi), "clip", (a,), lambda g: (g * mask,))


def identity(a) -> Node:
    return as_node(a)


# -- fused ops used by the addressing layer --------------------------------------

def l2_normalize(a, eps: float = EPS) -> Node:
    """Rows of ``a`` divided by ``max(||row||_2, eps)`` along the last axis."""
    a = as_node(a)
    x = a.value
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    active = norm > eps
    denom = np.where(active, norm, eps)
    y = x / denom

    def back(g):
        # d(x/|x|) = (g - y (y.g)) / |x| ; below eps the denominator is constant
        proj = (g * y).sum(axis=-1, keepdims=True)
        return (np.where(active, (g - y * proj) / denom, g / eps),)

    return _make(y, "l2_normalize", (a,), back)


def softmax_scaled(logits, kappa: float) -> Node:
    """softmax(kappa * logits) along the last axis, max-subtracted."""
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    a = as_node(logits)
    z = kappa * a.value
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (kappa * p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, "softmax", (a,), back)


def kl_div(p, q, eps: float = EPS) -> Node:
    """KL(p || q) reduced over the last axis, with q clamped below at eps.

    Terms with p_i == 0 contribute 0 (and 0 gradient).
    """
    p, q = as_node(p), as_node(q)
    if p.shape != q.shape:
        raise ValueError(f"kl_div: shape mismatch {p.shape} vs {q.shape}")
    pv, qv = p.value, q.value
    support = pv > 0
    qc = np.maximum(qv, eps)
    logp = np.log(np.where(support, pv, 1.0))
    terms = np.where(support, pv * (logp - np.log(qc)), 0.0)

    def back(g):
        g = np.expand_dims(g, -1)
        gp = np.where(support, g * (logp - np.log(qc) + 1.0), 0.0)
        gq = np.where(qv > eps, -g * pv / qc, 0.0)
        return gp, gq

    return _make(terms.sum(axis=-1), "kl_div", (p, q), back)


# -- composites ------------------------------------------------------------------

def cosine_sim(u, v, eps: float = EPS) -> Node:
    """u.v / (max(|u|, eps) max(|v|, eps)) along the last axis."""
    return sum(l2_normalize(u, eps) * l2_normalize(v, eps), axis=-1)


def cosine_matrix(x, bank, eps: float = EPS) -> Node:
    """Pairwise cosine similarities between rows of x (B, C) and bank (S, C)."""
    return matmul(l2_normalize(x, eps), transpose(l2_normalize(bank, eps)))


def l1_loss(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.shape != b.shape:
        raise ValueError(f"l1_loss: shape mismatch {a.shape} vs {b.shape}")
    return mean(abs(a - b))


def mse_loss(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.shape != b.shape:
        raise ValueError(f"mse_loss: shape mismatch {a.shape} vs {b.shape}")
    return mean(square(a - b))


# every differentiable operation exported by this module
REGISTERED_OPS = (
    "add", "sub", "mul", "div", "neg", "matmul", "transpose", "reshape", "getitem", "concat",
    "stack_rows", "sum", "mean", "exp", "log", "abs", "square", "tanh", "relu", "sigmoid", "clip",
    "identity", "l2_normalize", "softmax_scaled", "kl_div", "cosine_sim", "cosine_matrix",
    "l1_loss", "mse_loss",
)

ACTIVATIONS: dict[str, Callable[[Node], Node]] = {
    "tanh": tanh,
    "relu": relu,
    "sigmoid": sigmoid,
    "identity": identity,
}


# -- backward ----------------------------------------------------------------------

def _topo_order(root: Node) -> list[Node]:
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


def backward(root: Node) -> None:
    """Accumulate d(root)/d(leaf) into every reachable trainable leaf."""
    if root.value.size != 1:
        raise ValueError(f"backward requires a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad += g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)
