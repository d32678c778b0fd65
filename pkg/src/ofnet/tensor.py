"""Dense float tensors with reverse-mode automatic differentiation.

Everything downstream (layer primitives, warping, aggregation, the networks)
is built on this one Tensor type: a numpy array plus an optional place on the
gradient tape.  The tape is a DAG of closures; ``backward()`` on a scalar root
walks it once in reverse topological order and accumulates gradients into
every tensor created with ``requires_grad=True``.

All arithmetic runs in float64 by default so results can be compared against
slow reference computations at tight tolerances; float32 can be selected with
``set_default_dtype`` for cheaper runs.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

# When True (the default), every operation validates that its result is
# finite and raises NumericalError otherwise.  Kept as a module flag so the
# check can be disabled in throughput experiments.
FINITE_CHECKS = True

_grad_enabled = True


class NumericalError(ArithmeticError):
    """A forward or backward pass produced NaN or Inf."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (use for evaluation passes)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def grad_enabled() -> bool:
    return _grad_enabled


def set_default_dtype(dtype) -> None:
    """Select the precision new tensors are created with."""
    global DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("dtype must be float32 or float64")
    DEFAULT_DTYPE = dtype


def _check_finite(arr: np.ndarray, op: str) -> None:
    if FINITE_CHECKS and not np.isfinite(arr).all():
        raise NumericalError(f"{op} produced non-finite values")


class Tensor:
    """N-dimensional float array, optionally recorded on the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        _check_finite(self.data, "tensor creation")

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward_fn: Callable[[np.ndarray], None],
        op: str,
    ) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=DEFAULT_DTYPE)
        out.grad = None
        _check_finite(out.data, op)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
            out._op = op
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward_fn = None
            out._op = op
        return out

    # -- basic introspection --------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- gradient accumulation ------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=DEFAULT_DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar root.

        Gradients accumulate into every participating ``requires_grad``
        tensor; the recorded graph is released afterwards so parameter
        tensors can be reused for the next forward pass.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {self.shape}")
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
                if id(parent) not in seen:
                    stack.append((parent, False))

        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
                _check_finite_grads(node._parents, node._op)
        # release the tape; drop gradients held by interior nodes
        for node in order:
            if node._backward_fn is not None:
                node._backward_fn = None
                node._parents = ()
                node.grad = None

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        out_data = self.data + other.data

        def backward_fn(g):
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(_unbroadcast(g, other.shape))

        return Tensor._from_op(out_data, (self, other), backward_fn, "add")

    __radd__ = __add__

    def __neg__(self):
        def backward_fn(g):
            self._accumulate(-g)

        return Tensor._from_op(-self.data, (self,), backward_fn, "neg")

    def __sub__(self, other):
        other = _as_tensor(other)
        out_data = self.data - other.data

        def backward_fn(g):
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(-_unbroadcast(g, other.shape))

        return Tensor._from_op(out_data, (self, other), backward_fn, "sub")

    def __rsub__(self, other):
        return _as_tensor(other).__sub__(self)

    def __mul__(self, other):
        other = _as_tensor(other)
        out_data = self.data * other.data

        def backward_fn(g):
            self._accumulate(_unbroadcast(g * other.data, self.shape))
            other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor._from_op(out_data, (self, other), backward_fn, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        with np.errstate(divide="ignore", invalid="ignore"):
            out_data = self.data / other.data

        def backward_fn(g):
            self._accumulate(_unbroadcast(g / other.data, self.shape))
            other._accumulate(_unbroadcast(-g * self.data / (other.data * other.data), other.shape))

        return Tensor._from_op(out_data, (self, other), backward_fn, "div")

    def __rtruediv__(self, other):
        return _as_tensor(other).__truediv__(self)

    # -- reductions and elementwise functions ----------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward_fn(g):
            g = np.asarray(g)
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.shape))
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape))

        return Tensor._from_op(out_data, (self,), backward_fn, "sum")

    def mean(self) -> "Tensor":
        return self.sum() * (1.0 / self.size)

    def sqrt(self) -> "Tensor":
        out_data = np.sqrt(self.data)

        def backward_fn(g):
            self._accumulate(g * (0.5 / out_data))

        return Tensor._from_op(out_data, (self,), backward_fn, "sqrt")


def _check_finite_grads(parents: Sequence[Tensor], op: str) -> None:
    if not FINITE_CHECKS:
        return
    for p in parents:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NumericalError(f"backward of {op} produced non-finite gradients")


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate 4-D tensors along the channel axis (axis 1)."""
    return _concat(tensors, axis=1, op="concat_channels")


def concat_batch(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate 4-D tensors along the batch axis (axis 0)."""
    return _concat(tensors, axis=0, op="concat_batch")


def _concat(tensors: Sequence[Tensor], axis: int, op: str) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError(f"{op} needs at least one tensor")
    for t in tensors:
        if t.ndim != 4:
            raise ShapeError(f"{op} expects 4-D tensors, got {t.shape}")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)

    return Tensor._from_op(out_data, tensors, backward_fn, op)


def take_batch(x: Tensor, index: int) -> Tensor:
    """Select one batch row of a 4-D tensor, keeping the batch axis.

    The backward pass scatters the gradient into the selected slot only, so
    many slices of one shared tensor stay cheap.
    """
    if x.ndim != 4:
        raise ShapeError(f"take_batch expects a 4-D tensor, got {x.shape}")
    if not 0 <= index < x.shape[0]:
        raise ShapeError(f"batch index {index} outside extent {x.shape[0]}")
    out_data = x.data[index : index + 1]

    def backward_fn(g):
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[index : index + 1] += g

    return Tensor._from_op(out_data, (x,), backward_fn, "take_batch")


def backward(loss: Tensor) -> None:
    """Run the reverse sweep from a scalar loss tensor."""
    loss.backward()
