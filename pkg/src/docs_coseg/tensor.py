"""Minimal reverse-mode tensor used by the co-segmentation network.

A :class:`Tensor` wraps a numpy array and, when it was produced by a
differentiable op, a closure that pushes its gradient back to its parents.
Network activations are rank 4 ``(batch, channels, height, width)``; losses
are 0-d.
"""

from __future__ import annotations

from collections import OrderedDict
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class Tensor:
    """Dense array with an optional gradient buffer and a backward hook."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward: Callable[[np.ndarray], None] | None = None,
        name: str | None = None,
    ):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor through every upstream op."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self.accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior grads are not needed once consumed
                if node._parents:
                    node.grad = None


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float32)
    return Tensor(arr)


class ParamStore:
    """Named learnable tensors plus the optimizer's moment buffers."""

    def __init__(self, params: Iterable[tuple[str, np.ndarray]] = ()):
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        for name, value in params:
            self.add(name, value)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.ascontiguousarray(value), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for name, t in self.params.items():
            out[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        return out

    def view(self, names: Iterable[str]) -> "ParamStore":
        """Store sharing the given tensors (not copies) with fresh moments."""
        out = ParamStore()
        for name in names:
            out.params[name] = self.params[name]
        return out

    @contextmanager
    def frozen(self):
        """Treat every parameter as a constant, so forward passes build no graph."""
        saved = [(t, t.requires_grad) for t in self.params.values()]
        for t, _ in saved:
            t.requires_grad = False
        try:
            yield self
        finally:
            for t, flag in saved:
                t.requires_grad = flag

    def astype(self, dtype) -> "ParamStore":
        """Copy of the store with every parameter cast (moments dropped)."""
        return ParamStore((k, t.data.astype(dtype)) for k, t in self.params.items())

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def num_weights(self) -> int:
        return sum(t.data.size for t in self.params.values())
