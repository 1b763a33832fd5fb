"""Reverse-mode automatic differentiation over small dense float64 tensors.

Every op records its parents, so a gradient computed with ``create_graph=True``
is itself a graph and can be differentiated again. That is all the
meta-learning code needs for second-order terms.

Broadcasting is limited to two cases: a ``(1,)`` scalar against any tensor,
and same-rank operands where one side has size 1 along an axis (row/column
vectors against matrices).
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

OPS = (
    "input", "add", "matmul", "tanh", "sigmoid", "softmax", "log", "mul",
    "concat", "slice", "sum", "mean", "exp", "neg",
)

_ids = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    pass


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("id", "op", "parents", "value", "requires_grad", "attrs")

    def __init__(self, value, op="input", parents=(), requires_grad=False, attrs=None):
        self.id = next(_ids)
        self.op = op
        self.parents = parents
        self.value = value
        self.requires_grad = requires_grad
        self.attrs = attrs

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Node:
    if isinstance(x, Node):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return Node(arr)


def constant(value) -> Node:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return Node(arr)


def param(value) -> Node:
    """Leaf that gradients are taken with respect to."""
    node = constant(value)
    node.requires_grad = True
    return node


_ONES: dict[tuple[int, ...], Node] = {}


def _ones(shape) -> Node:
    node = _ONES.get(shape)
    if node is None:
        arr = np.ones(shape)
        arr.flags.writeable = False
        node = _ONES.setdefault(shape, Node(arr))
    return node


def _zeros(shape) -> Node:
    return Node(np.zeros(shape))


# --- forward rules ---------------------------------------------------------


def _broadcast_shape(op, a, b):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if sa == (1,):
        return sb
    if sb == (1,):
        return sa
    if len(sa) != len(sb):
        raise ShapeError(f"{op}: cannot combine shapes {sa} and {sb}")
    out = []
    for da, db in zip(sa, sb):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: expected matching dims, got {sa} and {sb}")
        out.append(max(da, db))
    return tuple(out)


def _softmax_value(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _reduce_value(x, attrs, fn):
    axis, keepdims = attrs
    if axis is None:
        return np.array([fn(x)])
    return fn(x, axis=axis, keepdims=keepdims)


def _matmul_value(a, b, attrs):
    ta, tb = attrs
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected 2-d operands, got {a.shape} and {b.shape}")
    x = a.T if ta else a
    y = b.T if tb else b
    if x.shape[1] != y.shape[0]:
        raise ShapeError(
            f"matmul: inner dims differ, expected {x.shape[1]} rows on the right, got {y.shape}"
        )
    return x @ y


def _concat_value(vals, axis):
    ref = vals[0].shape
    for v in vals[1:]:
        if len(v.shape) != len(ref) or any(
            d1 != d2 for i, (d1, d2) in enumerate(zip(ref, v.shape)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: expected shapes matching {ref} off axis {axis}, got {v.shape}")
    return np.concatenate(vals, axis=axis)


def _eval(op, vals, attrs):
    if op == "add":
        _broadcast_shape(op, vals[0], vals[1])
        return vals[0] + vals[1]
    if op == "mul":
        _broadcast_shape(op, vals[0], vals[1])
        return vals[0] * vals[1]
    if op == "neg":
        return -vals[0]
    if op == "matmul":
        return _matmul_value(vals[0], vals[1], attrs)
    if op == "tanh":
        return np.tanh(vals[0])
    if op == "sigmoid":
        x = vals[0]
        # split branches keep exp() from overflowing
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out
    if op == "exp":
        return np.exp(vals[0])
    if op == "log":
        return np.log(vals[0])
    if op == "softmax":
        return _softmax_value(vals[0])
    if op == "sum":
        return _reduce_value(vals[0], attrs, np.sum)
    if op == "mean":
        return _reduce_value(vals[0], attrs, np.mean)
    if op == "concat":
        return _concat_value(vals, attrs)
    if op == "slice":
        axis, start, stop = attrs
        x = vals[0]
        if not 0 <= start < stop <= x.shape[axis]:
            raise ShapeError(f"slice: range [{start}, {stop}) outside axis {axis} of {x.shape}")
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, stop)
        return x[tuple(idx)]
    raise ValueError(f"unknown op {op!r}")


def _make(op, parents, attrs=None) -> Node:
    value = _eval(op, [p.value for p in parents], attrs)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Node(value, op, tuple(parents), True, attrs)
    return Node(value, op, (), False, attrs)


def add(a, b):
    return _make("add", (_lift(a), _lift(b)))


def mul(a, b):
    return _make("mul", (_lift(a), _lift(b)))


def neg(a):
    return _make("neg", (a,))


def matmul(a, b, ta=False, tb=False):
    return _make("matmul", (_lift(a), _lift(b)), (ta, tb))


def tanh(a):
    return _make("tanh", (a,))


def sigmoid(a):
    return _make("sigmoid", (a,))


def exp(a):
    return _make("exp", (a,))


def log(a):
    return _make("log", (a,))


def softmax(a):
    """Softmax along the last axis."""
    return _make("softmax", (a,))


def _norm_axis(axis):
    if axis is None:
        return None
    return (axis,) if isinstance(axis, int) else tuple(axis)


def sum(a, axis=None, keepdims=False):  # noqa: A001
    axis = _norm_axis(axis)
    if axis is not None and not keepdims:
        raise ShapeError("sum: partial reductions must keep dims")
    return _make("sum", (a,), (axis, keepdims))


def mean(a, axis=None, keepdims=False):
    axis = _norm_axis(axis)
    if axis is not None and not keepdims:
        raise ShapeError("mean: partial reductions must keep dims")
    return _make("mean", (a,), (axis, keepdims))


def concat(nodes: Sequence[Node], axis=0):
    return _make("concat", tuple(nodes), axis)


def slice_(a, axis, start, stop):
    return _make("slice", (a,), (axis, start, stop))


# --- composites -------------------------------------------------------------


def log_softmax(z: Node) -> Node:
    shift = constant(z.value.max(axis=-1, keepdims=True))
    zs = z - shift
    return zs - log(sum(exp(zs), axis=-1, keepdims=True))


# --- backward rules ----------------------------------------------------------


def _unbroadcast(g: Node, shape) -> Node:
    if g.shape == shape:
        return g
    if len(shape) != g.value.ndim:
        return sum(g)
    axes = tuple(i for i, (d, gd) in enumerate(zip(shape, g.shape)) if d == 1 and gd != 1)
    return sum(g, axis=axes, keepdims=True)


def _vjp(node: Node, g: Node) -> list:
    op, ps = node.op, node.parents
    if op == "add":
        return [_unbroadcast(g, p.shape) if p.requires_grad else None for p in ps]
    if op == "mul":
        a, b = ps
        return [
            _unbroadcast(mul(g, b), a.shape) if a.requires_grad else None,
            _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None,
        ]
    if op == "neg":
        return [neg(g)]
    if op == "matmul":
        a, b = ps
        ta, tb = node.attrs
        ga = gb = None
        if a.requires_grad:
            ga = matmul(b, g, tb, True) if ta else matmul(g, b, False, not tb)
        if b.requires_grad:
            gb = matmul(g, a, True, ta) if tb else matmul(a, g, not ta, False)
        return [ga, gb]
    if op == "tanh":
        return [mul(g, add(_ones((1,)), neg(mul(node, node))))]
    if op == "sigmoid":
        return [mul(g, mul(node, add(_ones((1,)), neg(node))))]
    if op == "exp":
        return [mul(g, node)]
    if op == "log":
        # 1/x written as exp(-log x) keeps the rule inside the op set
        return [mul(g, exp(neg(node)))]
    if op == "softmax":
        gy = sum(mul(g, node), axis=-1, keepdims=True)
        return [mul(node, add(g, neg(gy)))]
    if op in ("sum", "mean"):
        x = ps[0]
        out = mul(g, _ones(x.shape))
        if op == "mean":
            out = mul(out, constant(node.value.size / x.value.size))
        return [out]
    if op == "concat":
        axis = node.attrs
        grads, start = [], 0
        for p in ps:
            stop = start + p.shape[axis]
            grads.append(slice_(g, axis, start, stop) if p.requires_grad else None)
            start = stop
        return grads
    if op == "slice":
        axis, start, stop = node.attrs
        x = ps[0]
        parts = []
        if start > 0:
            shp = list(x.shape)
            shp[axis] = start
            parts.append(_zeros(tuple(shp)))
        parts.append(g)
        if stop < x.shape[axis]:
            shp = list(x.shape)
            shp[axis] = x.shape[axis] - stop
            parts.append(_zeros(tuple(shp)))
        return [concat(parts, axis) if len(parts) > 1 else g]
    raise ValueError(f"no gradient rule for op {op!r}")


def topological_order(outputs: Iterable[Node], grad_only=False) -> list[Node]:
    order, seen = [], set()
    for root in outputs:
        if root.id in seen:
            continue
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for p in node.parents:
                if p.id not in seen and (p.requires_grad or not grad_only):
                    stack.append((p, False))
    return order


def grad(loss: Node, wrt: Sequence[Node], create_graph=False) -> list[Node]:
    """Gradients of a scalar ``loss`` with respect to each node in ``wrt``.

    With ``create_graph`` the returned nodes are differentiable functions of
    the graph; otherwise they are constants.
    """
    if loss.shape != (1,):
        raise ShapeError(f"backward: loss must have shape (1,), got {loss.shape}")
    grads: dict[int, Node] = {loss.id: _ones((1,))}
    order = topological_order([loss], grad_only=True) if loss.requires_grad else [loss]
    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        for node in reversed(order):
            g = grads.get(node.id)
            if g is None or not node.parents:
                continue
            for p, pg in zip(node.parents, _vjp(node, g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(p.id)
                grads[p.id] = pg if prev is None else add(prev, pg)
    return [grads.get(w.id) or _zeros(w.shape) for w in wrt]


def backward(loss: Node, wrt: Sequence[Node]) -> dict[int, np.ndarray]:
    """GradMap: node id to gradient array, shaped like the node's value."""
    return {w.id: g.value for w, g in zip(wrt, grad(loss, wrt))}


def forward(outputs: Sequence[Node], bindings: dict[Node, np.ndarray] | None = None) -> list[np.ndarray]:
    """Re-evaluate recorded graph nodes in topological order.

    ``bindings`` replaces the values of input nodes before evaluation.
    Nodes created under :func:`no_grad` carry no parents and act as constants.
    """
    for node, value in (bindings or {}).items():
        if node.op != "input":
            raise ValueError(f"can only bind input nodes, got {node.op}")
        value = np.asarray(value, dtype=np.float64)
        if value.shape != node.shape:
            raise ShapeError(f"input: expected shape {node.shape}, got {value.shape}")
        if not np.all(np.isfinite(value)):
            raise ValueError("input: non-finite values")
        node.value = value
    for node in topological_order(outputs):
        if node.parents:
            node.value = _eval(node.op, [p.value for p in node.parents], node.attrs)
    return [o.value for o in outputs]


def backward_through_update(
    theta: dict[str, list[Node]],
    inner_loss: Node,
    alpha: dict[str, Node | list[Node]],
    outer_loss_builder: Callable[[dict[str, list[Node]]], Node],
    auxiliary: Sequence[Node] = (),
    first_order: bool = False,
) -> dict[int, np.ndarray]:
    """Meta-gradient of ``outer(theta - alpha * grad inner(theta))``.

    ``alpha`` holds one entry per layer of ``theta``: either a single
    ``(1,)`` rate for the whole layer or a list of per-tensor rates.
    ``first_order`` detaches the inner gradient. Returns gradients for every
    theta tensor, every alpha node and every ``auxiliary`` node.
    """
    if len(alpha) != len(theta) or set(alpha) != set(theta):
        raise ValueError(f"expected one alpha per layer ({len(theta)}), got {len(alpha)}")
    updated = inner_step(theta, inner_loss, alpha, create_graph=not first_order)
    outer = outer_loss_builder(updated)
    targets = [p for layer in theta.values() for p in layer]
    for rate in alpha.values():
        targets.extend(rate if isinstance(rate, list) else [rate])
    targets.extend(auxiliary)
    return backward(outer, targets)


def inner_step(theta, inner_loss, alpha, create_graph=True):
    """``theta - alpha * grad``; layers missing from ``alpha`` pass through untouched."""
    names = [n for n in theta if n in alpha]
    flat = [p for n in names for p in theta[n]]
    grads = iter(grad(inner_loss, flat, create_graph=create_graph))
    updated = {}
    for name, tensors in theta.items():
        if name not in alpha:
            updated[name] = list(tensors)
            continue
        rate = alpha[name]
        rates = rate if isinstance(rate, list) else [rate] * len(tensors)
        if len(rates) != len(tensors):
            raise ValueError(f"layer {name}: {len(tensors)} tensors but {len(rates)} rates")
        updated[name] = [p - r * next(grads) for p, r in zip(tensors, rates)]
    return updated
