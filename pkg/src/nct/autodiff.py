"""Minimal reverse-mode automatic differentiation over numpy arrays.

The graph is built define-by-run: every operation on a ``Var`` records its
inputs and a local backward closure, and ``backward`` traverses the recorded
nodes once in reverse topological order. ``detach`` cuts the graph, so
gradients through a detached branch are exactly zero.

Parameters live in flat float64 vectors (``ParameterVector``) with a named
segment layout; ``segment`` pulls a named piece out of a flat parameter
``Var`` and routes its gradient back into the flat vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ConfigurationError(ValueError):
    """Raised when shapes, layouts, or settings are inconsistent."""


@dataclass
class ParameterVector:
    """Flat float64 parameter storage with a named (name, shape) layout."""

    values: np.ndarray
    layout: list[tuple[str, tuple[int, ...]]]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ConfigurationError("parameter values must be a flat vector")
        total = sum(int(np.prod(shape)) for _, shape in self.layout)
        if total != self.values.size:
            raise ConfigurationError(
                f"layout covers {total} elements but vector has {self.values.size}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ConfigurationError("parameter vector contains non-finite values")

    @classmethod
    def zeros(cls, layout: Sequence[tuple[str, tuple[int, ...]]]) -> "ParameterVector":
        total = sum(int(np.prod(shape)) for _, shape in layout)
        return cls(np.zeros(total), list(layout))

    def offsets(self) -> dict[str, tuple[int, tuple[int, ...]]]:
        out = {}
        start = 0
        for name, shape in self.layout:
            out[name] = (start, shape)
            start += int(np.prod(shape))
        return out

    def get(self, name: str) -> np.ndarray:
        start, shape = self.offsets()[name]
        return self.values[start : start + int(np.prod(shape))].reshape(shape)

    def set(self, name: str, value: np.ndarray) -> None:
        start, shape = self.offsets()[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != tuple(shape):
            raise ConfigurationError(f"segment {name} expects shape {shape}")
        self.values[start : start + value.size] = value.ravel()

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), list(self.layout))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Var:
    """A node in the recorded computation graph."""

    __slots__ = ("data", "grad", "parents", "requires_grad")

    def __init__(self, data, parents=(), requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        # parents: tuple of (Var, fn) where fn maps upstream grad -> local grad
        self.parents: tuple = tuple(
            (p, fn) for p, fn in parents if p.requires_grad
        )
        self.requires_grad = requires_grad or bool(self.parents)

    @property
    def shape(self):
        return self.data.shape

    # -- graph construction helpers -------------------------------------

    def _coerce(self, other) -> "Var":
        return other if isinstance(other, Var) else Var(other)

    def __add__(self, other):
        other = self._coerce(other)
        return Var(
            self.data + other.data,
            parents=(
                (self, lambda g: _unbroadcast(g, self.shape)),
                (other, lambda g: _unbroadcast(g, other.shape)),
            ),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        return Var(
            self.data - other.data,
            parents=(
                (self, lambda g: _unbroadcast(g, self.shape)),
                (other, lambda g: _unbroadcast(-g, other.shape)),
            ),
        )

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)
        return Var(
            self.data * other.data,
            parents=(
                (self, lambda g: _unbroadcast(g * other.data, self.shape)),
                (other, lambda g: _unbroadcast(g * self.data, other.shape)),
            ),
        )

    __rmul__ = __mul__

    def __neg__(self):
        return Var(-self.data, parents=((self, lambda g: -g),))

    def __matmul__(self, other):
        other = self._coerce(other)
        return Var(
            self.data @ other.data,
            parents=(
                (self, lambda g: g @ other.data.T),
                (other, lambda g: self.data.T @ g),
            ),
        )

    def sum(self, axis=None, keepdims=False):
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, self.shape).copy()

        return Var(out, parents=((self, back),))

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, shape):
        return Var(
            self.data.reshape(shape),
            parents=((self, lambda g: g.reshape(self.shape)),),
        )

    @property
    def T(self):
        return Var(self.data.T, parents=((self, lambda g: g.T),))

    def detach(self) -> "Var":
        """Stop-gradient: the returned node is a constant for backward."""
        return Var(self.data)


def tanh(x: Var) -> Var:
    out = np.tanh(x.data)
    return Var(out, parents=((x, lambda g: g * (1.0 - out * out)),))


def softplus(x: Var) -> Var:
    """Numerically stable log(1 + exp(x)); the smooth-rectifier activation."""
    out = np.logaddexp(0.0, x.data)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    return Var(out, parents=((x, lambda g: g * sig),))


def exp(x: Var) -> Var:
    out = np.exp(x.data)
    return Var(out, parents=((x, lambda g: g * out),))


def sqrt(x: Var) -> Var:
    out = np.sqrt(x.data)
    return Var(out, parents=((x, lambda g: g * (0.5 / out)),))


def concat(vars: Sequence[Var], axis: int = 1) -> Var:
    datas = [v.data for v in vars]
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def make_back(i):
        return lambda g: np.split(g, splits, axis=axis)[i]

    return Var(
        np.concatenate(datas, axis=axis),
        parents=tuple((v, make_back(i)) for i, v in enumerate(vars)),
    )


def segment(flat: Var, start: int, shape: tuple[int, ...]) -> Var:
    """Named-segment view of a flat parameter vector, with gradient scatter."""
    size = int(np.prod(shape))
    out = flat.data[start : start + size].reshape(shape)

    def back(g):
        full = np.zeros_like(flat.data)
        full[start : start + size] = np.asarray(g).ravel()
        return full

    return Var(out, parents=((flat, back),))


def backward(output: Var, output_grad=None) -> None:
    """Accumulate gradients of ``output`` into every reachable ``.grad``.

    Each node is visited exactly once (reverse topological order).
    """
    if output_grad is None:
        output_grad = np.ones_like(output.data)
    if not output.requires_grad:
        raise RuntimeError("backward called on a graph with no trainable inputs")

    # iterative topological sort; recursion would overflow on deep graphs
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(output): np.asarray(output_grad, dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        for parent, fn in node.parents:
            pg = fn(g)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


def grad(output: Var, wrt: Var, output_grad=None) -> np.ndarray:
    """Convenience wrapper: gradient of ``output`` with respect to ``wrt``."""
    wrt.grad = None
    backward(output, output_grad)
    if wrt.grad is None:
        return np.zeros_like(wrt.data)
    return wrt.grad


def finite_diff_grad(
    loss: Callable[[np.ndarray], float], values: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient oracle over a flat value vector."""
    values = np.asarray(values, dtype=np.float64)
    out = np.zeros_like(values)
    for i in range(values.size):
        bumped = values.copy()
        bumped[i] += h
        up = loss(bumped)
        bumped[i] -= 2 * h
        down = loss(bumped)
        out[i] = (up - down) / (2 * h)
    return out
