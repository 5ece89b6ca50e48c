"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tensor wraps an ndarray and records the operations applied to it; calling
``backward()`` on a scalar result fills the ``grad`` buffer of every
reachable leaf that has ``requires_grad`` set. Training runs in float32; a
float64 mode (pass float64 arrays in) exists for finite-difference checks.
"""

from __future__ import annotations

import numpy as np


class NumericalError(RuntimeError):
    """Raised when a NaN/Inf shows up where the pipeline requires finite values."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A node in the computation graph: value plus optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        if not isinstance(data, np.ndarray):
            if isinstance(data, np.generic):
                data = np.asarray(data)  # numpy scalar: keep its dtype
            else:
                data = np.asarray(data, dtype=np.float32)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # ---- graph construction helpers -------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar node, filling grads of all leaves."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss node")
        if self._backward is None and not self._parents and not self.requires_grad:
            raise ValueError("backward() on a node with no recorded forward pass")
        topo: list[Tensor] = []
        seen = set()

        def visit(node: Tensor):
            stack = [(node, False)]
            while stack:
                n, expanded = stack.pop()
                if expanded:
                    topo.append(n)
                    continue
                if id(n) in seen:
                    continue
                seen.add(id(n))
                stack.append((n, True))
                for p in n._parents:
                    stack.append((p, False))

        visit(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ---- elementwise arithmetic ------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.data.dtype))
        out_data = self.data + other.data

        def backward(g):
            self._accumulate(_unbroadcast(g, self.data.shape))
            other._accumulate(_unbroadcast(g, other.data.shape))

        return Tensor(out_data, _parents=(self, other), _backward=backward)

    __radd__ = __add__

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.data.dtype))
        out_data = self.data * other.data

        def backward(g):
            self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        return Tensor(out_data, _parents=(self, other), _backward=backward)

    __rmul__ = __mul__

    def __neg__(self):
        return self * np.asarray(-1.0, dtype=self.data.dtype)

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.data.dtype))
        return self + (-other)

    def __truediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.data.dtype))
        out_data = self.data / other.data

        def backward(g):
            self._accumulate(_unbroadcast(g / other.data, self.data.shape))
            other._accumulate(_unbroadcast(-g * self.data / (other.data * other.data), other.data.shape))

        return Tensor(out_data, _parents=(self, other), _backward=backward)

    def __pow__(self, exponent: float):
        out_data = self.data ** exponent

        def backward(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1))

        return Tensor(out_data, _parents=(self,), _backward=backward)

    # ---- linear algebra ---------------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        out_data = self.data @ other.data

        def backward(g):
            self._accumulate(g @ other.data.T)
            other._accumulate(self.data.T @ g)

        return Tensor(out_data, _parents=(self, other), _backward=backward)

    def transpose(self) -> "Tensor":
        out_data = self.data.T

        def backward(g):
            self._accumulate(g.T)

        return Tensor(out_data, _parents=(self,), _backward=backward)

    # ---- shape ops ----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        orig = self.data.shape
        out_data = self.data.reshape(*shape)

        def backward(g):
            self._accumulate(g.reshape(orig))

        return Tensor(out_data, _parents=(self,), _backward=backward)

    # ---- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.data.shape).astype(self.data.dtype, copy=False))
                return
            gg = g
            if not keepdims:
                gg = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(gg, self.data.shape).astype(self.data.dtype, copy=False))

        return Tensor(out_data, _parents=(self,), _backward=backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.data.shape[a] for a in axes]))
        scale = np.asarray(1.0 / count, dtype=self.data.dtype)
        return self.sum(axis=axis, keepdims=keepdims) * scale

    # ---- nonlinearities -------------------------------------------------------

    def relu(self) -> "Tensor":
        out_data = np.maximum(self.data, 0)

        def backward(g):
            self._accumulate(g * (self.data > 0))

        return Tensor(out_data, _parents=(self,), _backward=backward)

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def backward(g):
            self._accumulate(g * out_data)

        return Tensor(out_data, _parents=(self,), _backward=backward)

    def log(self) -> "Tensor":
        out_data = np.log(self.data)

        def backward(g):
            self._accumulate(g / self.data)

        return Tensor(out_data, _parents=(self,), _backward=backward)

    def sqrt(self) -> "Tensor":
        out_data = np.sqrt(self.data)

        def backward(g):
            self._accumulate(g * (0.5 / out_data))

        return Tensor(out_data, _parents=(self,), _backward=backward)

    def log_softmax(self) -> "Tensor":
        """Row-wise log-softmax over the last axis, max-subtracted for stability."""
        shifted = self.data - self.data.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        out_data = shifted - lse
        softmax = np.exp(out_data)

        def backward(g):
            self._accumulate(g - softmax * g.sum(axis=-1, keepdims=True))

        return Tensor(out_data, _parents=(self,), _backward=backward)

    def pick(self, indices: np.ndarray) -> "Tensor":
        """Select one column per row: out[i] = self[i, indices[i]]."""
        rows = np.arange(self.data.shape[0])
        out_data = self.data[rows, indices]

        def backward(g):
            full = np.zeros_like(self.data)
            full[rows, indices] = g
            self._accumulate(full)

        return Tensor(out_data, _parents=(self,), _backward=backward)


def as_tensor(x, dtype=np.float32) -> Tensor:
    """Wrap an array as a non-differentiable leaf."""
    return Tensor(np.asarray(x, dtype=dtype))


def parameter(data: np.ndarray) -> Tensor:
    """Wrap an array as a trainable leaf."""
    return Tensor(data, requires_grad=True)


def check_finite(x: np.ndarray, what: str = "value") -> None:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite {what} encountered")
