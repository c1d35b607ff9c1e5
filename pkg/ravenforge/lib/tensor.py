"""Reverse-mode automatic differentiation over numpy arrays.

This module provides the `Tensor` type and the `Function` protocol every
differentiable operation implements. A forward pass records, on each output
tensor, the `Function` that created it; `backward(loss)` walks that graph in
reverse topological order and accumulates gradients into every leaf tensor
that has `requires_grad` set.

Numeric precision is a process-wide default (32-bit) that the gradient-check
suite switches to 64-bit with the `precision` context manager.

Usage:
    w = Tensor(np.ones(3), requires_grad=True)
    loss = (w * w).sum()
    backward(loss)
    w.grad  # array([2., 2., 2.])
"""

import contextlib
import logging
from typing import Any, Iterator, Sequence

import numpy as np

from ravenforge.errors import ContractError, NumericError, ParameterError, ShapeError

logger = logging.getLogger(__name__)

PRECISIONS: dict[str, type[np.floating]] = {"float32": np.float32, "float64": np.float64}

_default_dtype: type[np.floating] = np.float32
_grad_enabled = True


def default_dtype() -> type[np.floating]:
    """Return the dtype new tensors are created with."""
    return _default_dtype


def set_default_dtype(name: str) -> None:
    """Set the process-wide tensor precision ("float32" or "float64")."""
    global _default_dtype
    if name not in PRECISIONS:
        raise ParameterError(f"unknown precision {name!r}, expected one of {sorted(PRECISIONS)}")
    _default_dtype = PRECISIONS[name]


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the default tensor precision."""
    global _default_dtype
    previous = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _default_dtype = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run forward passes without recording a graph."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def check_finite(values: np.ndarray, what: str) -> None:
    """Raise `NumericError` if `values` holds NaN or Inf."""
    if not np.isfinite(values).all():
        raise NumericError(f"non-finite values in {what} (shape {tuple(values.shape)})")


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast dimensions so `grad` matches `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """Base class for differentiable operations.

    Subclasses implement `forward` on raw arrays and `backward`, which maps the
    gradient of the output to one gradient per input tensor (or None for inputs
    that receive no gradient).
    """

    def __init__(self, *tensors: "Tensor"):
        self.tensors = tensors

    def forward(self, *args: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> np.ndarray | tuple[np.ndarray | None, ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        """Run the forward pass and attach this function to the output."""
        func = cls(*tensors)
        out = func.forward(*(t.data for t in tensors), **kwargs)
        check_finite(out, f"{cls.__name__} output")
        requires_grad = _grad_enabled and any(t.requires_grad for t in tensors)
        return Tensor(
            out,
            requires_grad=requires_grad,
            creator=func if requires_grad else None,
            dtype=out.dtype,
        )


class Tensor:
    """An n-dimensional array that can take part in reverse-mode differentiation.

    Attributes:
        data: The values, stored contiguously in the default precision
        requires_grad: Whether gradients should flow into this tensor
        grad: Accumulated gradient (same shape as `data`) or None
        creator: The `Function` that produced this tensor, None for leaves
    """

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        creator: Function | None = None,
        dtype: Any = None,
    ):
        self.data = np.ascontiguousarray(data, dtype=dtype or _default_dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.creator = creator

    def __repr__(self) -> str:
        return (
            f"Tensor(shape={self.shape}, dtype={self.data.dtype}, "
            f"requires_grad={self.requires_grad})"
        )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if grad.shape != self.shape:
            raise ShapeError(
                f"gradient shape {grad.shape} does not match tensor shape {self.shape}"
            )
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype)
        else:
            self.grad = self.grad + grad

    # Arithmetic

    def __add__(self, other: "Tensor | float") -> "Tensor":
        return Add.apply(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other: "Tensor | float") -> "Tensor":
        return Add.apply(self, Neg.apply(_lift(other)))

    def __rsub__(self, other: "Tensor | float") -> "Tensor":
        return Add.apply(_lift(other), Neg.apply(self))

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        return Mul.apply(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other: "Tensor | float") -> "Tensor":
        if isinstance(other, Tensor):
            return Mul.apply(self, Pow.apply(other, exponent=-1.0))
        return Mul.apply(self, _lift(1.0 / other))

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return MatMul.apply(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return GetItem.apply(self, index=index)

    # Elementwise and reductions

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        axes = range(self.ndim) if axis is None else np.atleast_1d(axis)
        count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # Movement

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes: int) -> "Tensor":
        return Transpose.apply(self, axes=axes)

    @staticmethod
    def concat(tensors: Sequence["Tensor"], axis: int = 0) -> "Tensor":
        return Concat.apply(*tensors, axis=axis)


def _lift(value: "Tensor | float") -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, children_done = stack.pop()
        if id(node) in visited:
            continue
        if children_done:
            visited.add(id(node))
            order.append(node)
            continue
        stack.append((node, True))
        if node.creator is not None:
            for parent in node.creator.tensors:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf with `requires_grad`.

    Gradients add onto whatever is already stored in `leaf.grad`; call
    `zero_grad` (or `Adam.zero_grad`) before each optimizer step.

    Raises:
        ContractError: If `loss` is not a scalar or does not require gradients
        NumericError: If any propagated gradient is non-finite
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node.creator is None:
            node.accumulate_grad(grad)
            continue
        input_grads = node.creator.backward(grad)
        if not isinstance(input_grads, tuple):
            input_grads = (input_grads,)
        for parent, parent_grad in zip(node.creator.tensors, input_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent_grad.shape != parent.shape:
                raise ShapeError(
                    f"{type(node.creator).__name__} produced gradient {parent_grad.shape} "
                    f"for input {parent.shape}"
                )
            check_finite(parent_grad, f"gradient of {type(node.creator).__name__}")
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad


# Elementwise arithmetic


class Add(Function):
    def forward(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        self.shapes = (x.shape, y.shape)
        return x + y

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Neg(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        return -x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return -grad


class Mul(Function):
    def forward(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        self.x, self.y = x, y
        return x * y

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return unbroadcast(grad * self.y, self.x.shape), unbroadcast(grad * self.x, self.y.shape)


class Pow(Function):
    def forward(self, x: np.ndarray, exponent: float) -> np.ndarray:
        self.x, self.exponent = x, exponent
        return x**exponent

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad * self.exponent * self.x ** (self.exponent - 1)


class Exp(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.out = np.exp(x)
        return self.out

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad * self.out


class Log(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.x = x
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(x)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad / self.x


class MatMul(Function):
    def forward(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-2]:
            raise ShapeError(f"cannot matmul shapes {x.shape} and {y.shape}")
        self.x, self.y = x, y
        return np.matmul(x, y)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        dx = np.matmul(grad, np.swapaxes(self.y, -1, -2))
        dy = np.matmul(np.swapaxes(self.x, -1, -2), grad)
        return unbroadcast(dx, self.x.shape), unbroadcast(dy, self.y.shape)


# Reductions and movement


class Sum(Function):
    def forward(
        self, x: np.ndarray, axis: int | tuple[int, ...] | None, keepdims: bool
    ) -> np.ndarray:
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return np.broadcast_to(grad, self.shape)


class Reshape(Function):
    def forward(self, x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
        self.shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError as e:
            raise ShapeError(f"cannot reshape {x.shape} to {shape}") from e

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad.reshape(self.shape)


class Transpose(Function):
    def forward(self, x: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
        self.axes = axes or tuple(reversed(range(x.ndim)))
        return np.transpose(x, self.axes)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return np.transpose(grad, np.argsort(self.axes))


class GetItem(Function):
    def forward(self, x: np.ndarray, index: Any) -> np.ndarray:
        self.shape, self.dtype, self.index = x.shape, x.dtype, index
        return np.array(x[index])

    def backward(self, grad: np.ndarray) -> np.ndarray:
        out = np.zeros(self.shape, dtype=self.dtype)
        np.add.at(out, self.index, grad)
        return out


class Concat(Function):
    def forward(self, *arrays: np.ndarray, axis: int) -> np.ndarray:
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, ...]:
        return tuple(np.split(grad, self.splits, axis=self.axis))
