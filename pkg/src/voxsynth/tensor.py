"""Reverse-mode autodiff over a fixed set of dense-array operations.

A Tensor wraps a float32 or float64 numpy array plus an optional gradient
buffer of the same shape. Operations in voxsynth.ops record a backward
closure on their result; backward() replays those closures in reverse
topological order. The activation layout convention is
(batch, channel, z, y, x).
"""

from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Suspend graph recording; ops run forward-only inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, values, requires_grad=False):
        v = np.asarray(values)
        if v.dtype != np.float32 and v.dtype != np.float64:
            v = v.astype(np.float32)
        self.values = v
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self):
        return self.values.size

    def detach(self):
        return Tensor(self.values)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.values.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, seed=None):
        """Populate .grad on every reachable tensor with requires_grad.

        seed defaults to ones (the usual scalar-loss case).
        """
        if seed is None:
            seed = np.ones_like(self.values)
        order = _toposort(self)
        self.accumulate_grad(seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return (
            f"Tensor(shape={tuple(self.shape)}, dtype={self.values.dtype.name}, "
            f"requires_grad={self.requires_grad})"
        )


def _toposort(root):
    """Iterative postorder over the recorded graph."""
    order = []
    seen = set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order
