"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps a numpy array and records, for every operation, a closure
that pushes the output gradient back to its parents. Calling ``backward()``
on a scalar walks the graph once in reverse topological order. Gradients
accumulate additively until cleared, so repeated backward calls sum.

Everything is float64 and single-threaded apart from BLAS matmul, whose
reduction order is fixed for a given shape, keeping runs bit-reproducible.
"""

from __future__ import annotations

import contextlib
from typing import Iterable

import numpy as np

from .errors import ConfigurationError, GradientNaN, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation / augmentation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over the axes numpy broadcast to reach it from `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A node in the differentiation graph.

    data: float64 ndarray (row-major); grad: same-shape buffer or None;
    requires_grad: whether gradients flow to this node.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple["Tensor", ...] = ()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._backward = None

    # -- construction ------------------------------------------------------

    @staticmethod
    def result(data: np.ndarray, op: str, parents: Iterable["Tensor"]) -> "Tensor":
        """Wrap an op result; records the graph edge only when grads are on."""
        parents = tuple(parents)
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        if not needs:
            return Tensor(data, requires_grad=False, op=op)
        return Tensor(data, requires_grad=True, op=op, parents=parents)

    # -- basic properties ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    # -- gradient plumbing ---------------------------------------------------

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from a finite scalar; accumulates into .grad."""
        if self.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        if not np.isfinite(self.data.reshape(-1)[0]):
            raise ValueError(f"loss is not finite: {self.item()}")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
        for node in reversed(topo):
            if node.grad is not None and np.isnan(node.grad).any():
                raise GradientNaN(f"NaN gradient at node op={node.op!r} shape={node.shape}")

    # -- arithmetic -----------------------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other):
        other = self._lift(other)
        out = Tensor.result(self.data + other.data, "add", (self, other))
        if out.requires_grad:
            def bwd(g):
                if self.requires_grad:
                    self.accumulate_grad(_unbroadcast(g, self.shape))
                if other.requires_grad:
                    other.accumulate_grad(_unbroadcast(g, other.shape))
            out._backward = bwd
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor.result(-self.data, "neg", (self,))
        if out.requires_grad:
            out._backward = lambda g: self.accumulate_grad(-g)
        return out

    def __sub__(self, other):
        other = self._lift(other)
        out = Tensor.result(self.data - other.data, "sub", (self, other))
        if out.requires_grad:
            def bwd(g):
                if self.requires_grad:
                    self.accumulate_grad(_unbroadcast(g, self.shape))
                if other.requires_grad:
                    other.accumulate_grad(_unbroadcast(-g, other.shape))
            out._backward = bwd
        return out

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        other = self._lift(other)
        out = Tensor.result(self.data * other.data, "mul", (self, other))
        if out.requires_grad:
            def bwd(g):
                if self.requires_grad:
                    self.accumulate_grad(_unbroadcast(g * other.data, self.shape))
                if other.requires_grad:
                    other.accumulate_grad(_unbroadcast(g * self.data, other.shape))
            out._backward = bwd
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        out = Tensor.result(self.data / other.data, "div", (self, other))
        if out.requires_grad:
            def bwd(g):
                if self.requires_grad:
                    self.accumulate_grad(_unbroadcast(g / other.data, self.shape))
                if other.requires_grad:
                    other.accumulate_grad(
                        _unbroadcast(-g * self.data / (other.data * other.data), other.shape))
            out._backward = bwd
        return out

    def __rtruediv__(self, other):
        return self._lift(other) / self

    # -- linear algebra / shaping ----------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        other = self._lift(other)
        if self.shape[-1] != other.shape[0]:
            raise ShapeError(
                f"matmul inner axes disagree: {self.shape[-1]} (lhs axis {self.ndim - 1}) "
                f"vs {other.shape[0]} (rhs axis 0)")
        out = Tensor.result(self.data @ other.data, "matmul", (self, other))
        if out.requires_grad:
            def bwd(g):
                if self.requires_grad:
                    self.accumulate_grad(g @ other.data.T)
                if other.requires_grad:
                    other.accumulate_grad(self.data.T @ g)
            out._backward = bwd
        return out

    __matmul__ = matmul

    def transpose(self) -> "Tensor":
        out = Tensor.result(self.data.T, "transpose", (self,))
        if out.requires_grad:
            out._backward = lambda g: self.accumulate_grad(g.T)
        return out

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def reshape(self, *shape: int) -> "Tensor":
        out = Tensor.result(self.data.reshape(*shape), "reshape", (self,))
        if out.requires_grad:
            out._backward = lambda g: self.accumulate_grad(g.reshape(self.shape))
        return out

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = Tensor.result(self.data.sum(axis=axis, keepdims=keepdims), "sum", (self,))
        if out.requires_grad:
            def bwd(g):
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self.accumulate_grad(np.broadcast_to(g, self.shape).copy())
            out._backward = bwd
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise nonlinearities ---------------------------------------------

    def log(self) -> "Tensor":
        out = Tensor.result(np.log(self.data), "log", (self,))
        if out.requires_grad:
            out._backward = lambda g: self.accumulate_grad(g / self.data)
        return out

    def sqrt(self) -> "Tensor":
        y = np.sqrt(self.data)
        out = Tensor.result(y, "sqrt", (self,))
        if out.requires_grad:
            out._backward = lambda g: self.accumulate_grad(g * 0.5 / y)
        return out

    def clamp(self, lo: float, hi: float) -> "Tensor":
        y = np.clip(self.data, lo, hi)
        out = Tensor.result(y, "clamp", (self,))
        if out.requires_grad:
            mask = (self.data >= lo) & (self.data <= hi)
            out._backward = lambda g: self.accumulate_grad(g * mask)
        return out

    def relu(self) -> "Tensor":
        out = Tensor.result(np.maximum(self.data, 0.0), "relu", (self,))
        if out.requires_grad:
            # derivative taken as 0 at exactly 0
            mask = self.data > 0.0
            out._backward = lambda g: self.accumulate_grad(g * mask)
        return out

    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)
        out = Tensor.result(y, "tanh", (self,))
        if out.requires_grad:
            out._backward = lambda g: self.accumulate_grad(g * (1.0 - y * y))
        return out


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise nonlinearity; kind is 'relu' or 'tanh'."""
    if kind == "relu":
        return x.relu()
    if kind == "tanh":
        return x.tanh()
    raise ConfigurationError(f"unknown activation kind: {kind!r}")
