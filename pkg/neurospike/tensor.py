"""
Reverse-mode automatic differentiation on numpy arrays.

Every operation on a :class:`Tensor` that requires a gradient records a
closure on the output node. :meth:`Tensor.backward` walks the recorded
graph in reverse topological order and frees it afterwards, so one
forward pass owns one tape.
"""

from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from neurospike.errors import (
    DomainError,
    InvalidStateError,
    NumericError,
    ShapeError,
)

BCE_CLAMP = 1e-7

_grad_enabled = True

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """
    N-dimensional float array with an optional gradient buffer.

    Storage is float32 unless a float64 array is passed in (or
    ``dtype`` is given), which is how gradient checks run in double
    precision.
    """

    __slots__ = (
        "data",
        "grad",
        "requires_grad",
        "_backward",
        "_prev",
        "_op",
    )

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype=None,
        _children: tuple = (),
        _op: str = "",
    ) -> None:
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            is_double = (
                isinstance(data, np.ndarray) and data.dtype == np.float64
            )
            dtype = np.float64 if is_double else np.float32
        self.data: np.ndarray = np.asarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._backward: Optional[Callable[[], None]] = None
        self._prev = _children
        self._op = _op

    # -- construction helpers ---------------------------------------------

    @classmethod
    def from_op(
        cls, data: np.ndarray, parents: tuple, op: str
    ) -> "Tensor":
        """Wrap an op result; it joins the tape only if a parent needs it."""
        needs_grad = _grad_enabled and any(p.requires_grad for p in parents)
        return cls(
            data,
            requires_grad=needs_grad,
            dtype=data.dtype,
            _children=parents if needs_grad else (),
            _op=op,
        )

    def _lift(self, other: ArrayLike) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other), dtype=self.data.dtype)

    def accumulate(self, grad: np.ndarray) -> None:
        """Add ``grad`` (reduced over broadcast axes) to this gradient."""
        if not self.requires_grad:
            return
        grad = _unbroadcast(np.asarray(grad), self.data.shape)
        if self.grad is None:
            self.grad = grad.astype(self.data.dtype, copy=True)
        else:
            self.grad += grad

    # -- properties -------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return (
            f"Tensor(shape={self.shape}, dtype={self.dtype}, "
            f"requires_grad={self.requires_grad})"
        )

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        other = self._lift(other)
        out = Tensor.from_op(self.data + other.data, (self, other), "+")
        if out.requires_grad:

            def _backward():
                self.accumulate(out.grad)
                other.accumulate(out.grad)

            out._backward = _backward
        return out

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return self + other

    def __neg__(self) -> "Tensor":
        out = Tensor.from_op(-self.data, (self,), "neg")
        if out.requires_grad:

            def _backward():
                self.accumulate(-out.grad)

            out._backward = _backward
        return out

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return self + (-self._lift(other))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return self._lift(other) + (-self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        other = self._lift(other)
        out = Tensor.from_op(self.data * other.data, (self, other), "*")
        if out.requires_grad:

            def _backward():
                self.accumulate(out.grad * other.data)
                other.accumulate(out.grad * self.data)

            out._backward = _backward
        return out

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return self * other

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        other = self._lift(other)
        out = Tensor.from_op(self.data / other.data, (self, other), "/")
        if out.requires_grad:

            def _backward():
                self.accumulate(out.grad / other.data)
                other.accumulate(
                    -out.grad * self.data / (other.data * other.data)
                )

            out._backward = _backward
        return out

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return self._lift(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        out = Tensor.from_op(self.data**exponent, (self,), f"**{exponent}")
        if out.requires_grad:

            def _backward():
                self.accumulate(
                    out.grad * exponent * self.data ** (exponent - 1)
                )

            out._backward = _backward
        return out

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return self.matmul(other)

    def matmul(self, other: "Tensor") -> "Tensor":
        other = self._lift(other)
        if self.ndim < 2 or other.ndim < 2:
            raise ShapeError(
                f"matmul needs operands of rank >= 2, got {self.shape} "
                f"and {other.shape}"
            )
        if self.shape[-1] != other.shape[-2]:
            raise ShapeError(
                f"matmul inner dimensions differ: {self.shape} @ "
                f"{other.shape}"
            )
        out = Tensor.from_op(
            np.matmul(self.data, other.data), (self, other), "@"
        )
        if out.requires_grad:

            def _backward():
                self.accumulate(
                    np.matmul(out.grad, np.swapaxes(other.data, -1, -2))
                )
                other.accumulate(
                    np.matmul(np.swapaxes(self.data, -1, -2), out.grad)
                )

            out._backward = _backward
        return out

    # -- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        total = np.sum(
            self.data, axis=axis, keepdims=keepdims, dtype=np.float64
        )
        out = Tensor.from_op(
            np.asarray(total).astype(self.data.dtype), (self,), "sum"
        )
        if out.requires_grad:

            def _backward():
                grad = out.grad
                if axis is not None and not keepdims:
                    grad = np.expand_dims(grad, axis)
                self.accumulate(np.broadcast_to(grad, self.shape))

            out._backward = _backward
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- shape ------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor.from_op(self.data.reshape(shape), (self,), "reshape")
        if out.requires_grad:

            def _backward():
                self.accumulate(out.grad.reshape(self.shape))

            out._backward = _backward
        return out

    def transpose(self, *axes) -> "Tensor":
        axes = axes or tuple(reversed(range(self.ndim)))
        out = Tensor.from_op(self.data.transpose(axes), (self,), "T")
        if out.requires_grad:
            inverse = np.argsort(axes)

            def _backward():
                self.accumulate(out.grad.transpose(inverse))

            out._backward = _backward
        return out

    # -- elementwise functions --------------------------------------------

    def exp(self) -> "Tensor":
        out = Tensor.from_op(np.exp(self.data), (self,), "exp")
        if out.requires_grad:

            def _backward():
                self.accumulate(out.grad * out.data)

            out._backward = _backward
        return out

    def log(self) -> "Tensor":
        if np.any(self.data <= 0):
            raise DomainError("log of a non-positive value")
        out = Tensor.from_op(np.log(self.data), (self,), "log")
        if out.requires_grad:

            def _backward():
                self.accumulate(out.grad / self.data)

            out._backward = _backward
        return out

    def relu(self) -> "Tensor":
        out = Tensor.from_op(np.maximum(self.data, 0), (self,), "relu")
        if out.requires_grad:

            def _backward():
                self.accumulate(out.grad * (self.data > 0))

            out._backward = _backward
        return out

    def sigmoid(self) -> "Tensor":
        # split form keeps exp() from overflowing on either tail
        x = self.data
        z = np.exp(-np.abs(x))
        value = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
        out = Tensor.from_op(value.astype(x.dtype), (self,), "sigmoid")
        if out.requires_grad:

            def _backward():
                self.accumulate(out.grad * out.data * (1.0 - out.data))

            out._backward = _backward
        return out

    def softmax(self, axis: int = -1) -> "Tensor":
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        value = e / e.sum(axis=axis, keepdims=True)
        out = Tensor.from_op(value, (self,), "softmax")
        if out.requires_grad:

            def _backward():
                s = out.data
                inner = np.sum(out.grad * s, axis=axis, keepdims=True)
                self.accumulate(s * (out.grad - inner))

            out._backward = _backward
        return out

    # -- backward ---------------------------------------------------------

    def _topological_order(self) -> list["Tensor"]:
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))
        return order

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """
        Back-propagate from this node and free the recorded tape.

        :param grad: Seed gradient; defaults to 1 for scalar outputs.
        """
        if not self.requires_grad:
            raise InvalidStateError(
                "backward() called on a tensor that does not require grad"
            )
        if grad is None:
            if self.size != 1:
                raise ShapeError(
                    "backward() without a seed gradient needs a scalar, "
                    f"got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        order = self._topological_order()
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()

        for node in order:
            if node._prev:
                node.grad = None
                node._prev = ()
                node._backward = None
            elif node.grad is not None and not np.all(
                np.isfinite(node.grad)
            ):
                raise NumericError(
                    f"non-finite gradient for parameter of shape {node.shape}"
                )


def as_tensor(data: ArrayLike, dtype=None) -> Tensor:
    if isinstance(data, Tensor):
        return data
    return Tensor(data, dtype=dtype)


def init_uniform(
    shape: tuple, fan_in: int, rng: np.random.Generator, dtype=np.float32
) -> Tensor:
    """Trainable tensor drawn from U(-1/sqrt(fan_in), +1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in)
    values = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Tensor(values, requires_grad=True, dtype=dtype)


def init_zeros(shape: tuple, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class ClassWeights(BaseModel):
    model_config = ConfigDict(frozen=True)

    w0: float = Field(1.0, gt=0)
    w1: float = Field(1.0, gt=0)


def weighted_bce(
    pred: Tensor,
    target: ArrayLike,
    weights: ClassWeights = ClassWeights(),
    classes: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Class-weighted binary cross entropy averaged over all elements.

    :param pred: Probabilities in [0, 1].
    :param target: 0/1 targets, same shape as ``pred``.
    :param weights: Per-class loss multipliers.
    :param classes: Optional class label per leading row; every element
        of a row is then weighted by that row's class. Without it each
        element is weighted by its own target.
    :return: Scalar loss tensor.
    """
    target = np.asarray(
        target.data if isinstance(target, Tensor) else target,
        dtype=np.float64,
    )
    if target.shape != pred.shape:
        raise ShapeError(
            f"prediction shape {pred.shape} differs from target shape "
            f"{target.shape}"
        )
    p = pred.data.astype(np.float64)
    if not np.all(np.isfinite(p)):
        raise NumericError("non-finite prediction passed to weighted_bce")
    if np.any((p < 0) | (p > 1)):
        raise DomainError("predictions must lie in [0, 1]")

    if classes is None:
        labels = target
    else:
        labels = np.asarray(classes, dtype=np.float64).reshape(
            (-1,) + (1,) * (pred.ndim - 1)
        )
    w = np.broadcast_to(
        np.where(labels >= 0.5, weights.w1, weights.w0), p.shape
    )

    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    terms = w * (target * np.log(pc) + (1.0 - target) * np.log1p(-pc))
    loss = -np.sum(terms, dtype=np.float64) / p.size
    out = Tensor.from_op(
        np.asarray(loss, dtype=pred.data.dtype), (pred,), "bce"
    )
    if out.requires_grad:

        def _backward():
            # clamped-point gradient passes straight through the clamp
            dp = -w * (target / pc - (1.0 - target) / (1.0 - pc)) / p.size
            pred.accumulate(out.grad * dp)

        out._backward = _backward
    return out


class AdamState(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    lr: float = Field(5e-4, gt=0)
    beta1: float = Field(0.9, gt=0, lt=1)
    beta2: float = Field(0.999, gt=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    m: list[np.ndarray] = Field(default_factory=list)
    v: list[np.ndarray] = Field(default_factory=list)
    t: int = Field(0, ge=0)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """
    Apply one bias-corrected Adam update in place.

    Moment buffers are created on the first call; gradients are left
    untouched.
    """
    if not state.m and not state.v:
        state.m = [np.zeros(p.shape, dtype=np.float64) for p in params]
        state.v = [np.zeros(p.shape, dtype=np.float64) for p in params]
    if len(state.m) != len(params) or len(state.v) != len(params):
        raise InvalidStateError(
            f"optimizer tracks {len(state.m)} buffers for "
            f"{len(params)} parameters"
        )
    for index, (param, m, v) in enumerate(zip(params, state.m, state.v)):
        if param.grad is None:
            raise InvalidStateError(f"parameter {index} has no gradient")
        if m.shape != param.shape or v.shape != param.shape:
            raise InvalidStateError(
                f"moment buffer shape {m.shape} does not match parameter "
                f"{index} of shape {param.shape}"
            )
        if param.grad.shape != param.shape:
            raise InvalidStateError(
                f"gradient shape {param.grad.shape} does not match "
                f"parameter {index} of shape {param.shape}"
            )

    state.t += 1
    correction1 = 1.0 - state.beta1**state.t
    correction2 = 1.0 - state.beta2**state.t
    for param, m, v in zip(params, state.m, state.v):
        g = param.grad.astype(np.float64)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        step = state.lr * (m / correction1) / (
            np.sqrt(v / correction2) + state.eps
        )
        param.data -= step.astype(param.data.dtype)


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-4,
) -> float:
    """
    Compare analytic gradients of a scalar function with central
    differences.

    :param fn: Function of ``inputs`` returning a scalar Tensor.
    :param inputs: float64 tensors; those with ``requires_grad`` are
        checked.
    :param step: Finite-difference step.
    :return: The largest relative error over all checked inputs.
    """
    for tensor in inputs:
        tensor.grad = None
    fn(*inputs).backward()
    analytic = [
        None if t.grad is None else t.grad.copy() for t in inputs
    ]

    worst = 0.0
    with no_grad():
        for tensor, grad in zip(inputs, analytic):
            if not tensor.requires_grad:
                continue
            if grad is None:
                grad = np.zeros_like(tensor.data)
            numeric = np.zeros_like(tensor.data)
            flat = tensor.data.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + step
                plus = fn(*inputs).item()
                flat[i] = original - step
                minus = fn(*inputs).item()
                flat[i] = original
                numeric.reshape(-1)[i] = (plus - minus) / (2 * step)
            scale = max(np.linalg.norm(grad), np.linalg.norm(numeric), 1e-8)
            worst = max(worst, np.linalg.norm(grad - numeric) / scale)
    return float(worst)
