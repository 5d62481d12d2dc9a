"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations the attention model and its loss need are provided. Each
op records its parents and a closure that pushes the output gradient back to
them; :func:`backward` walks the tape in reverse topological order. Any
non-finite value, forward or backward, raises immediately with the op named.
"""
from __future__ import annotations

import numpy as np


class DiffArray:
    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "requires_grad")

    def __init__(self, value, *, requires_grad: bool = False, parents=(), backward_fn=None, op: str = "leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"DiffArray(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_diff(other)))

    def __rsub__(self, other):
        return add(as_diff(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def as_diff(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


def _check(value: np.ndarray, op: str, stage: str = "forward") -> None:
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite {stage} value in op '{op}'")


def _node(value, parents, backward_fn, op) -> DiffArray:
    _check(value, op)
    return DiffArray(value, parents=tuple(parents), backward_fn=backward_fn, op=op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.value + b.value, (a, b), back, "add")


def neg(a) -> DiffArray:
    return _node(-a.value, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)

    def back(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _node(a.value * b.value, (a, b), back, "mul")


def einsum(spec: str, *operands) -> DiffArray:
    """Differentiable ``np.einsum`` for explicit specs without repeated indices per operand."""
    ops = [as_diff(x) for x in operands]
    ins, out = spec.replace(" ", "").split("->")
    subs = ins.split(",")
    if len(subs) != len(ops):
        raise ValueError(f"einsum spec {spec!r} expects {len(subs)} operands")
    for k, s in enumerate(subs):
        others = out + "".join(subs[:k] + subs[k + 1 :])
        if len(set(s)) != len(s) or any(c not in others for c in s):
            raise ValueError(f"einsum spec {spec!r}: unsupported index pattern in operand {k}")
    value = np.einsum(spec, *[o.value for o in ops], optimize=True)

    def back(g):
        grads = []
        for k, o in enumerate(ops):
            if not o.requires_grad:
                grads.append(None)
                continue
            rest = [ops[j].value for j in range(len(ops)) if j != k]
            rest_subs = [subs[j] for j in range(len(ops)) if j != k]
            gspec = ",".join([out] + rest_subs) + "->" + subs[k]
            grads.append(np.einsum(gspec, g, *rest, optimize=True))
        return tuple(grads)

    return _node(value, ops, back, f"einsum[{spec}]")


def matmul(a, b) -> DiffArray:
    """``np.matmul`` on operands with at least two dimensions, batch axes broadcast."""
    a, b = as_diff(a), as_diff(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ValueError("matmul operands need at least two dimensions")

    def back(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _node(np.matmul(a.value, b.value), (a, b), back, "matmul")


def transpose(a, axes) -> DiffArray:
    inv = np.argsort(axes)
    return _node(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape) -> DiffArray:
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take(a, index, axis: int = 0) -> DiffArray:
    """Basic (slice/integer) indexing along one axis."""
    key = (slice(None),) * (axis % a.value.ndim) + (index,)

    def back(g):
        out = np.zeros_like(a.value)
        out[key] = g
        return (out,)

    return _node(a.value[key], (a,), back, "take")


def concat(items, axis: int) -> DiffArray:
    items = [as_diff(x) for x in items]
    sizes = np.cumsum([x.shape[axis] for x in items])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(np.concatenate([x.value for x in items], axis=axis), items, back, "concat")


def leaky_relu(a, slope: float = 0.2) -> DiffArray:
    pos = a.value > 0
    return _node(np.where(pos, a.value, slope * a.value), (a,), lambda g: (np.where(pos, g, slope * g),),
                 "leaky_relu")


def relu(a) -> DiffArray:
    pos = a.value > 0
    return _node(np.where(pos, a.value, 0.0), (a,), lambda g: (np.where(pos, g, 0.0),), "relu")


_BELOW_ONE = np.nextafter(1.0, 0.0)


def tanh(a) -> DiffArray:
    """Tanh kept strictly inside (-1, 1) even where float64 would round to +-1."""
    y = np.clip(np.tanh(a.value), -_BELOW_ONE, _BELOW_ONE)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def square(a) -> DiffArray:
    return _node(a.value * a.value, (a,), lambda g: (2.0 * a.value * g,), "square")


def logcosh(a) -> DiffArray:
    x = a.value
    ax = np.abs(x)
    y = ax + np.log1p(np.exp(-2.0 * ax)) - np.log(2.0)
    return _node(y, (a,), lambda g: (g * np.tanh(x),), "logcosh")


def masked_softmax(a, mask=None, axis: int = -1) -> DiffArray:
    """Softmax along ``axis`` restricted to ``mask``; masked entries are exactly zero."""
    x = a.value
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not np.all(mask.any(axis=axis)):
        raise ValueError("masked_softmax: a row has no admissible entry")
    shifted = np.where(mask, x, -np.inf)
    shifted = shifted - shifted.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (a,), back, "masked_softmax")


def total(a) -> DiffArray:
    return _node(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean(a) -> DiffArray:
    n = a.value.size
    return _node(np.asarray(a.value.mean()), (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),), "mean")


def _topo(root: DiffArray) -> list[DiffArray]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: DiffArray) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every node that requires it."""
    if loss.value.size != 1:
        raise ValueError("backward() needs a scalar loss")
    nodes = _topo(loss)
    for n in nodes:
        n.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(nodes):
        if node.backward_fn is None or node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for p, g in zip(node.parents, grads):
            if g is None or not p.requires_grad:
                continue
            _check(g, node.op, "gradient")
            p.grad = g if p.grad is None else p.grad + g


def gradients(loss: DiffArray, params: dict) -> dict:
    """Run the backward pass and return ``{name: gradient}`` for ``params``."""
    backward(loss)
    return {k: (np.zeros_like(p.value) if p.grad is None else np.array(p.grad)) for k, p in params.items()}
