"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray plus an optional graph node (operation tag,
parent tensors, backward closure).  Nodes are only recorded when at least
one input participates in the graph, so constant subexpressions stay
graph-free and never receive gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


@dataclass
class GraphNode:
    op: str
    inputs: tuple
    attrs: dict = field(default_factory=dict)


def _as_array(values, dtype=None):
    arr = np.asarray(values)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype.kind != "f":
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    def __init__(self, values, requires_grad: bool = False, dtype=None):
        self.values = _as_array(values, dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[GraphNode] = None
        self._backward: Optional[Callable] = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def in_graph(self) -> bool:
        return self.requires_grad or self.node is not None

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        op = self.node.op if self.node else None
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={op})"

    # -- graph construction --------------------------------------------

    @staticmethod
    def _make(values, op, parents: Sequence["Tensor"], backward, attrs=None):
        out = Tensor.__new__(Tensor)
        out.values = values
        out.requires_grad = False
        out.grad = None
        if any(p.in_graph() for p in parents):
            out.node = GraphNode(op, tuple(parents), attrs or {})
            out._backward = backward
        else:
            out.node = None
            out._backward = None
        return out

    def backward(self):
        if self.values.size != 1:
            raise ShapeError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            t, done = stack.pop()
            if done:
                topo.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.inputs:
                    if id(p) not in seen and p.in_graph():
                        stack.append((p, False))
        self.grad = np.ones_like(self.values)
        for t in reversed(topo):
            if t._backward is None or t.grad is None:
                continue
            for p, g in zip(t.node.inputs, t._backward(t.grad)):
                if g is None or not p.in_graph():
                    continue
                if g.shape != p.values.shape:
                    g = g.reshape(p.values.shape)
                p.grad = g if p.grad is None else p.grad + g

    # -- elementwise primitives ----------------------------------------

    def _lift(self, x) -> "Tensor":
        # python scalars adopt the tensor's dtype so float32 graphs stay float32
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=self.values.dtype))

    @staticmethod
    def _conform(a: "Tensor", b: "Tensor", op: str):
        if a.shape != b.shape and a.size != 1 and b.size != 1:
            raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform")

    @staticmethod
    def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
        # collapse a broadcast gradient back onto a scalar operand
        if g.shape == tuple(shape):
            return g
        return np.sum(g).reshape(shape).astype(g.dtype)

    def __add__(self, other):
        other = self._lift(other)
        Tensor._conform(self, other, "add")
        out_vals = self.values + other.values

        def bwd(g):
            return (Tensor._reduce_to(g, self.shape),
                    Tensor._reduce_to(g, other.shape))

        return Tensor._make(out_vals, "add", (self, other), bwd)

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.values, "neg", (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = self._lift(other)
        Tensor._conform(self, other, "sub")
        out_vals = self.values - other.values

        def bwd(g):
            return (Tensor._reduce_to(g, self.shape),
                    Tensor._reduce_to(-g, other.shape))

        return Tensor._make(out_vals, "sub", (self, other), bwd)

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        other = self._lift(other)
        Tensor._conform(self, other, "mul")
        a, b = self.values, other.values

        def bwd(g):
            return (Tensor._reduce_to(g * b, self.shape),
                    Tensor._reduce_to(g * a, other.shape))

        return Tensor._make(a * b, "mul", (self, other), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        Tensor._conform(self, other, "div")
        a, b = self.values, other.values

        def bwd(g):
            return (Tensor._reduce_to(g / b, self.shape),
                    Tensor._reduce_to(-g * a / (b * b), other.shape))

        return Tensor._make(a / b, "div", (self, other), bwd)

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __pow__(self, exponent: float):
        a = self.values

        def bwd(g):
            return (g * exponent * a ** (exponent - 1),)

        return Tensor._make(a ** exponent, "pow", (self,), bwd,
                            {"exponent": exponent})

    def relu(self):
        a = self.values
        return Tensor._make(np.maximum(a, 0), "relu", (self,),
                            lambda g: (g * (a > 0),))

    def log(self):
        if np.any(self.values <= 0):
            bad = float(np.min(self.values))
            raise ValueError(f"log: input contains value {bad} <= 0; clamp first")
        a = self.values
        return Tensor._make(np.log(a), "log", (self,), lambda g: (g / a,))

    def exp(self):
        out_vals = np.exp(self.values)
        return Tensor._make(out_vals, "exp", (self,), lambda g: (g * out_vals,))

    def sqrt(self):
        out_vals = np.sqrt(self.values)

        def bwd(g):
            return (g / (2 * out_vals),)

        return Tensor._make(out_vals, "sqrt", (self,), bwd)

    def clamp(self, lo: float, hi: float):
        a = self.values
        mask = (a >= lo) & (a <= hi)
        return Tensor._make(np.clip(a, lo, hi), "clamp", (self,),
                            lambda g: (g * mask,), {"lo": lo, "hi": hi})

    def sum(self, axis=None):
        shape = self.shape
        out_vals = np.sum(self.values, axis=axis)

        def bwd(g):
            if axis is None:
                return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)
            gx = np.expand_dims(g, axis)
            return (np.broadcast_to(gx, shape).astype(g.dtype, copy=True),)

        return Tensor._make(np.asarray(out_vals), "sum", (self,), bwd,
                            {"axis": axis})

    def mean(self, axis=None):
        count = self.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis) * (1.0 / float(count))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.values.reshape(shape), "reshape", (self,),
                            lambda g: (g.reshape(old),), {"shape": shape})

    def __getitem__(self, index):
        out_vals = np.asarray(self.values[index]).copy()

        def bwd(g):
            gx = np.zeros_like(self.values)
            np.add.at(gx, index, g.reshape(out_vals.shape))
            return (gx,)

        return Tensor._make(out_vals, "slice", (self,), bwd, {"index": index})


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    vals = [t.values for t in tensors]
    out_vals = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor._make(out_vals, "concat", tuple(tensors), bwd, {"axis": axis})


def backward(loss: Tensor, params: dict) -> dict:
    """Run backprop from a scalar loss and return {name: grad array}."""
    loss.backward()
    return {name: p.grad for name, p in params.items()}
