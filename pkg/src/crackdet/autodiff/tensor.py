"""Reverse-mode tape over ``numpy`` arrays."""

from __future__ import annotations

import os

import numpy as np

DEBUG = bool(os.environ.get("CRACKDET_DEBUG"))


class Tensor:
    """A float64 array that remembers how it was produced.

    ``backward_fn`` maps the gradient of this tensor to a tuple of gradients,
    one per parent (``None`` for parents that need none).
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name", "tag")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, name=None, tag=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.parents = tuple(parents) if self.requires_grad else ()
        self.backward_fn = backward_fn if self.requires_grad else None
        self.name = name
        self.tag = tag
        if DEBUG and not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values produced in {name or 'tensor'}")

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        order, seen = [], set()

        def visit(node):
            # iterative DFS; the graph is deep enough to hit the recursion limit otherwise
            stack = [(node, False)]
            while stack:
                n, expanded = stack.pop()
                if expanded:
                    order.append(n)
                    continue
                if id(n) in seen:
                    continue
                seen.add(id(n))
                stack.append((n, True))
                for p in n.parents:
                    if id(p) not in seen:
                        stack.append((p, False))

        visit(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # small arithmetic surface needed for loss assembly
    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        if other.shape != self.shape:
            raise ValueError(f"shape mismatch in add: {self.shape} vs {other.shape}")
        return Tensor(self.data + other.data, parents=(self, other), backward_fn=lambda g: (g, g))

    __radd__ = __add__

    def __mul__(self, k):
        if isinstance(k, Tensor):
            raise TypeError("only scalar multiplication is supported")
        k = float(k)
        return Tensor(self.data * k, parents=(self,), backward_fn=lambda g: (g * k,))

    __rmul__ = __mul__

    def sum(self):
        shape = self.shape
        return Tensor(self.data.sum(), parents=(self,), backward_fn=lambda g: (np.broadcast_to(g, shape).copy(),))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)
