"""A small tape-free reverse-mode differentiation engine over numpy arrays.

Each :class:`Tensor` remembers the tensors it was computed from and a
closure that pushes its gradient back to them.  ``backward`` walks the graph
in reverse topological order.  Only the operations the MoE model needs are
provided; every one of them is float64.

    >>> w = Tensor(np.ones((2, 3)), requires_grad=True)
    >>> x = Tensor(np.arange(3.0))
    >>> (w @ x).sum().backward()
    >>> w.grad
    array([[0., 1., 2.],
           [0., 1., 2.]])
"""

from __future__ import annotations

from typing import Callable

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    # make ``ndarray <op> Tensor`` defer to the Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def T(self) -> Tensor:
        return self.transpose()

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    @staticmethod
    def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    # arithmetic ----------------------------------------------------------

    def __add__(self, other) -> Tensor:
        other = _lift(other)

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return Tensor._make(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self) -> Tensor:
        def backward(g):
            self._accumulate(-g)

        return Tensor._make(-self.data, (self,), backward)

    def __sub__(self, other) -> Tensor:
        return self + (-_lift(other))

    def __rsub__(self, other) -> Tensor:
        return _lift(other) + (-self)

    def __mul__(self, other) -> Tensor:
        other = _lift(other)

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor._make(self.data * other.data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = _lift(other)
        out_data = self.data / other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g * out_data / other.data, other.shape))

        return Tensor._make(out_data, (self, other), backward)

    def __matmul__(self, other) -> Tensor:
        other = _lift(other)
        a, b = self.data, other.data

        def backward(g):
            if self.requires_grad:
                if b.ndim == 1:
                    self._accumulate(np.multiply.outer(g, b))
                else:
                    self._accumulate(g @ b.T)
            if other.requires_grad:
                if a.ndim == 1:
                    other._accumulate(np.multiply.outer(a, g))
                elif b.ndim == 1:
                    other._accumulate(a.T @ g)
                else:
                    other._accumulate(a.T @ g)

        return Tensor._make(a @ b, (self, other), backward)

    def transpose(self) -> Tensor:
        def backward(g):
            self._accumulate(g.T)

        return Tensor._make(self.data.T, (self,), backward)

    def reshape(self, *shape) -> Tensor:
        def backward(g):
            self._accumulate(g.reshape(self.shape))

        return Tensor._make(self.data.reshape(*shape), (self,), backward)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape))

        return Tensor._make(
            np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), backward
        )

    def __getitem__(self, index) -> Tensor:
        def backward(g):
            full = np.zeros_like(self.data)
            np.add.at(full, index, g)
            self._accumulate(full)

        return Tensor._make(self.data[index], (self,), backward)

    def take(self, index, unique: bool = False) -> Tensor:
        """``self[index]``; with ``unique=True`` the backward pass skips ``np.add.at``."""
        if not unique:
            return self[index]

        def backward(g):
            full = np.zeros_like(self.data)
            full[index] = g
            self._accumulate(full)

        return Tensor._make(self.data[index], (self,), backward)

    # elementwise nonlinearities ---------------------------------------------

    def exp(self) -> Tensor:
        out_data = np.exp(self.data)

        def backward(g):
            self._accumulate(g * out_data)

        return Tensor._make(out_data, (self,), backward)

    def log(self) -> Tensor:
        def backward(g):
            self._accumulate(g / self.data)

        return Tensor._make(np.log(self.data), (self,), backward)

    def silu(self) -> Tensor:
        sig = 1.0 / (1.0 + np.exp(-self.data))
        out_data = self.data * sig

        def backward(g):
            self._accumulate(g * (sig * (1.0 + self.data * (1.0 - sig))))

        return Tensor._make(out_data, (self,), backward)

    def softmax(self) -> Tensor:
        """Softmax over the last axis."""
        z = self.data - self.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)

        def backward(g):
            self._accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))

        return Tensor._make(p, (self,), backward)

    def log_softmax(self) -> Tensor:
        """Log-softmax over the last axis."""
        z = self.data - self.data.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        out_data = z - lse
        p = np.exp(out_data)

        def backward(g):
            self._accumulate(g - p * g.sum(axis=-1, keepdims=True))

        return Tensor._make(out_data, (self,), backward)

    # graph traversal -------------------------------------------------------

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior gradients are not needed once propagated
                if node._parents:
                    node.grad = None


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def silu_ffn(x: Tensor, w_in: Tensor, w_out: Tensor) -> Tensor:
    """Fused ``silu(x @ w_in.T) @ w_out.T`` for a stack of row vectors."""
    pre = x.data @ w_in.data.T
    sig = 1.0 / (1.0 + np.exp(-pre))
    act = pre * sig
    out_data = act @ w_out.data.T

    def backward(g):
        if w_out.requires_grad:
            w_out._accumulate(g.T @ act)
        g_pre = (g @ w_out.data) * (sig * (1.0 + pre * (1.0 - sig)))
        if w_in.requires_grad:
            w_in._accumulate(g_pre.T @ x.data)
        if x.requires_grad:
            x._accumulate(g_pre @ w_in.data)

    return Tensor._make(out_data, (x, w_in, w_out), backward)


def scatter_rows(n_rows: int, index: np.ndarray, values: Tensor) -> Tensor:
    """Rows of ``values`` summed into an ``n_rows``-row zero matrix at ``index``."""
    out_data = np.zeros((n_rows,) + values.shape[1:])
    np.add.at(out_data, index, values.data)

    def backward(g):
        values._accumulate(g[index])

    return Tensor._make(out_data, (values,), backward)


def scatter_pieces(n_rows: int, indices: list[np.ndarray], pieces: list[Tensor],
                   width: int) -> Tensor:
    """Sum of row blocks: ``out[indices[j]] += pieces[j]``.

    Indices within one piece must be distinct; different pieces may overlap.
    """
    out_data = np.zeros((n_rows, width))
    for idx, piece in zip(indices, pieces):
        out_data[idx] += piece.data

    def backward(g):
        for idx, piece in zip(indices, pieces):
            if piece.requires_grad:
                piece._accumulate(g[idx])

    return Tensor._make(out_data, tuple(pieces), backward)
