"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tensor wraps an ndarray plus an optional gradient slot and a provenance
node (parents + backward closure). backward() visits each node exactly once
in a fixed topological order, so gradient accumulation is deterministic.
"""

from __future__ import annotations

import numpy as np


class AutodiffError(RuntimeError):
    pass


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to the original shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, (gs, ss) in enumerate(zip(grad.shape, shape)):
        if ss == 1 and gs != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, name=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        if self.data.ndim > 4:
            raise AutodiffError(f"tensors support up to 4 dims, got shape {self.data.shape}")
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward_fn
        self.name = name

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{grad})"

    def detach(self):
        return Tensor(self.data)

    def accumulate(self, grad):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    # -- graph ----------------------------------------------------------------
    def _toposort(self):
        order, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        return order

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise AutodiffError("backward() without explicit grad requires a scalar")
            grad = np.ones_like(self.data)
        self.grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.data.shape)
        for node in reversed(self._toposort()):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic -----------------------------------------------------------
    @staticmethod
    def _lift(other):
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=np.float64))

    def _binary(self, other, out_data, back_self, back_other):
        other = Tensor._lift(other)
        req = self.requires_grad or other.requires_grad
        parents = []
        if self.requires_grad:
            parents.append(self)
        if other.requires_grad:
            parents.append(other)

        def backward(g):
            if self.requires_grad:
                self.accumulate(_unbroadcast(back_self(g), self.shape))
            if other.requires_grad:
                other.accumulate(_unbroadcast(back_other(g), other.shape))

        return Tensor(out_data, req, tuple(parents), backward if req else None)

    def __add__(self, other):
        o = Tensor._lift(other)
        return self._binary(o, self.data + o.data, lambda g: g, lambda g: g)

    __radd__ = __add__

    def __sub__(self, other):
        o = Tensor._lift(other)
        return self._binary(o, self.data - o.data, lambda g: g, lambda g: -g)

    def __rsub__(self, other):
        o = Tensor._lift(other)
        return o.__sub__(self)

    def __mul__(self, other):
        o = Tensor._lift(other)
        return self._binary(o, self.data * o.data,
                            lambda g: g * o.data, lambda g: g * self.data)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = Tensor._lift(other)
        return self._binary(o, self.data / o.data,
                            lambda g: g / o.data,
                            lambda g: -g * self.data / (o.data * o.data))

    def __neg__(self):
        return self * -1.0

    def _unary(self, out_data, back):
        req = self.requires_grad

        def backward(g):
            self.accumulate(back(g))

        return Tensor(out_data, req, (self,) if req else (), backward if req else None)

    def abs(self):
        s = np.sign(self.data)
        return self._unary(np.abs(self.data), lambda g: g * s)

    def relu(self):
        mask = self.data > 0
        return self._unary(np.where(mask, self.data, 0.0), lambda g: g * mask)

    def tanh(self):
        y = np.tanh(self.data)
        return self._unary(y, lambda g: g * (1.0 - y * y))

    def sqrt(self):
        y = np.sqrt(self.data)
        return self._unary(y, lambda g: g * 0.5 / y)

    def sum(self, axis=None, keepdims=False):
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, self.shape).copy()

        return self._unary(np.asarray(out), back)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = self.data.reshape(shape)
        return self._unary(out, lambda g: g.reshape(self.shape))

    def transpose(self, axes):
        inv = np.argsort(axes)
        return self._unary(self.data.transpose(axes), lambda g: g.transpose(inv))

    def __matmul__(self, other):
        o = Tensor._lift(other)
        return self._binary(o, self.data @ o.data,
                            lambda g: g @ o.data.swapaxes(-1, -2),
                            lambda g: self.data.swapaxes(-1, -2) @ g)

    def gather_rows(self, index):
        """Select rows by an integer array; backward scatter-adds."""
        index = np.asarray(index, dtype=np.int64)
        out = self.data[index]

        def back(g):
            full = np.zeros_like(self.data)
            np.add.at(full, index, g)
            return full

        return self._unary(out, back)

    def slice_cols(self, start, stop):
        out = self.data[..., start:stop]

        def back(g):
            full = np.zeros_like(self.data)
            full[..., start:stop] = g
            return full

        return self._unary(out, back)


def custom_op(out_data, parents, vjp, name=None):
    """Build a Tensor from hand-written analytic gradients.

    vjp(upstream) must return one gradient array (or None) per parent, in
    order; gradients are accumulated only into parents that require them.
    """
    parents = tuple(parents)
    req = any(p.requires_grad for p in parents)

    def backward(g):
        grads = vjp(g)
        for p, pg in zip(parents, grads):
            if p.requires_grad and pg is not None:
                p.accumulate(pg)

    return Tensor(out_data, req, parents if req else (), backward if req else None, name=name)
