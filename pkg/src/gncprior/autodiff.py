"""A minimal reverse-mode tape over numpy arrays.

Only the handful of operations the prior needs are supported: elementwise
arithmetic with broadcasting, reductions, ``exp`` and whatever domain
operations are registered through :func:`apply`.  Nodes that do not depend
on a differentiable input carry no backward closures, so evaluating the
prior without gradients costs the same as plain numpy.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = ["Var", "var", "const", "apply", "grad", "value_of"]


class Var:
    """A node holding ``value`` and the vector-Jacobian products to its parents."""

    __slots__ = ("value", "parents", "requires_grad")
    __array_priority__ = 1000  # make ndarray <op> Var dispatch to Var

    def __init__(self, value, parents=(), requires_grad=False):
        self.value = np.asarray(value, dtype=float)
        self.parents = tuple(parents)
        self.requires_grad = requires_grad or bool(self.parents)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

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
        if p != 2:
            raise NotImplementedError("only squaring is supported")
        return mul(self, self)

    def sum(self, axis=None):
        return vsum(self, axis)

    def reshape(self, *shape):
        return reshape(self, *shape)


def var(value) -> Var:
    """A differentiable leaf."""
    return Var(value, requires_grad=True)


def const(value) -> Var:
    return value if isinstance(value, Var) else Var(value)


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def apply(value, inputs: Sequence, vjps: Sequence[Callable]) -> Var:
    """Create a node from ``value`` and one VJP per input.

    VJP callables are only kept for inputs that require gradients, and are
    called lazily during the backward pass.
    """
    parents = tuple(
        (x, f) for x, f in zip(inputs, vjps) if isinstance(x, Var) and x.requires_grad
    )
    return Var(value, parents)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    av, bv = value_of(a), value_of(b)
    return apply(av + bv, (a, b),
                 (lambda g: _unbroadcast(g, av.shape), lambda g: _unbroadcast(g, bv.shape)))


def neg(a):
    return apply(-value_of(a), (a,), (lambda g: -g,))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    return apply(av * bv, (a, b),
                 (lambda g: _unbroadcast(g * bv, av.shape), lambda g: _unbroadcast(g * av, bv.shape)))


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    return apply(out, (a, b),
                 (lambda g: _unbroadcast(g / bv, av.shape),
                  lambda g: _unbroadcast(-g * out / bv, bv.shape)))


def exp(a):
    out = np.exp(value_of(a))
    return apply(out, (a,), (lambda g: g * out,))


def vsum(a, axis=None):
    av = value_of(a)
    out = av.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, av.shape)
        axes = (axis,) if np.isscalar(axis) else axis
        return np.broadcast_to(np.expand_dims(g, tuple(a_ % av.ndim for a_ in axes)), av.shape)

    return apply(out, (a,), (vjp,))


def reshape(a, *shape):
    av = value_of(a)
    if len(shape) == 1 and isinstance(shape[0], tuple):
        shape = shape[0]
    return apply(av.reshape(shape), (a,), (lambda g: g.reshape(av.shape),))


def where(mask, a, b):
    """Select ``a`` where ``mask`` else ``b``; ``mask`` is constant."""
    m = np.asarray(mask, dtype=bool)
    av, bv = value_of(a), value_of(b)
    return apply(np.where(m, av, bv), (a, b),
                 (lambda g: _unbroadcast(np.where(m, g, 0.0), av.shape),
                  lambda g: _unbroadcast(np.where(m, 0.0, g), bv.shape)))


def _toposort(out: Var) -> list[Var]:
    order, seen = [], set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p, _ in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order[::-1]


def grad(out: Var, inputs: Iterable[Var], seed=None) -> list[np.ndarray]:
    """Gradients of ``sum(seed * out)`` with respect to ``inputs``.

    ``seed`` defaults to ones, i.e. the gradient of a scalar output.
    """
    inputs = list(inputs)
    grads = {id(out): np.ones_like(out.value) if seed is None else np.asarray(seed, float)}
    for node in _toposort(out):
        g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            key = id(parent)
            grads[key] = grads[key] + contrib if key in grads else contrib
    return [np.asarray(grads.get(id(x), np.zeros_like(x.value)), dtype=float).copy()
            if x.requires_grad else np.zeros_like(x.value) for x in inputs]
