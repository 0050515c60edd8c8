"""Reverse-mode differentiation over dense float64 matrices.

Every value is kept two-dimensional: scalars are 1x1 and vectors are rows.
Each operation records its parents and a closure that pushes the output
gradient back to them; :func:`backward` replays the closures in reverse
topological order.
"""
import logging
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from ctxdesc.errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

# op name -> factor applied to the incoming gradient of that op (fault injection)
_GRADIENT_FAULTS: dict[str, float] = {}
# active pattern recorders, see record_kinks()
_KINK_RECORDERS: list[list[np.ndarray]] = []


def _note_kink(pattern: np.ndarray) -> None:
    for recorder in _KINK_RECORDERS:
        recorder.append(pattern)


def _as_matrix(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim > 2:
        raise DimensionError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A matrix value in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = _as_matrix(data)
        self.grad = np.zeros_like(self.data)
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple["Tensor", ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, shape is {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], op: str,
              backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = Tensor(data)
        out.op = op
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # ------------------------------------------------------------------
    # elementwise arithmetic (numpy broadcasting rules)

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def _backward(g):
            if a.requires_grad:
                a.grad += _unbroadcast(g, a.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(g, b.shape)

        return Tensor._make(a.data + b.data, (a, b), "add", _backward)

    def __radd__(self, other) -> "Tensor":
        return as_tensor(other) + self

    def __neg__(self) -> "Tensor":
        a = self

        def _backward(g):
            a.grad -= g

        return Tensor._make(-a.data, (a,), "neg", _backward)

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def _backward(g):
            if a.requires_grad:
                a.grad += _unbroadcast(g, a.shape)
            if b.requires_grad:
                b.grad -= _unbroadcast(g, b.shape)

        return Tensor._make(a.data - b.data, (a, b), "sub", _backward)

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def _backward(g):
            if a.requires_grad:
                a.grad += _unbroadcast(g * b.data, a.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(g * a.data, b.shape)

        return Tensor._make(a.data * b.data, (a, b), "mul", _backward)

    def __rmul__(self, other) -> "Tensor":
        return as_tensor(other) * self

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def _backward(g):
            if a.requires_grad:
                a.grad += _unbroadcast(g / b.data, a.shape)
            if b.requires_grad:
                b.grad -= _unbroadcast(g * a.data / (b.data * b.data), b.shape)

        return Tensor._make(a.data / b.data, (a, b), "div", _backward)

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        a = self
        p = float(exponent)

        def _backward(g):
            a.grad += g * p * a.data ** (p - 1.0)

        return Tensor._make(a.data ** p, (a,), "pow", _backward)

    # ------------------------------------------------------------------
    # linear algebra and reductions

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")

        def _backward(g):
            if a.requires_grad:
                a.grad += g @ b.data.T
            if b.requires_grad:
                b.grad += a.data.T @ g

        return Tensor._make(a.data @ b.data, (a, b), "matmul", _backward)

    @property
    def T(self) -> "Tensor":
        a = self

        def _backward(g):
            a.grad += g.T

        return Tensor._make(a.data.T.copy(), (a,), "transpose", _backward)

    def sum(self, axis: int | None = None) -> "Tensor":
        a = self
        if axis is None:
            value = a.data.sum().reshape(1, 1)
        else:
            value = a.data.sum(axis=axis, keepdims=True)

        def _backward(g):
            a.grad += np.broadcast_to(g, a.shape)

        return Tensor._make(value, (a,), "sum", _backward)

    def mean(self, axis: int | None = None) -> "Tensor":
        count = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis) * (1.0 / count)

    # ------------------------------------------------------------------
    # nonlinearities

    def relu(self) -> "Tensor":
        a = self
        mask = a.data > 0
        _note_kink(mask)

        def _backward(g):
            a.grad += g * mask

        return Tensor._make(np.where(mask, a.data, 0.0), (a,), "relu", _backward)

    def tanh(self) -> "Tensor":
        a = self
        t = np.tanh(a.data)

        def _backward(g):
            a.grad += g * (1.0 - t * t)

        return Tensor._make(t, (a,), "tanh", _backward)

    def exp(self) -> "Tensor":
        a = self
        e = np.exp(a.data)

        def _backward(g):
            a.grad += g * e

        return Tensor._make(e, (a,), "exp", _backward)

    def log(self, floor: float = 0.0) -> "Tensor":
        """Natural log; arguments at or below ``floor`` are clamped and get no gradient."""
        a = self
        live = a.data > floor
        clamped = np.where(live, a.data, floor)
        with np.errstate(divide="ignore"):
            value = np.log(clamped)

        def _backward(g):
            a.grad += np.where(live, g / np.where(live, a.data, 1.0), 0.0)

        return Tensor._make(value, (a,), "log", _backward)

    def sqrt(self) -> "Tensor":
        """Square root with zero gradient where the value is 0."""
        a = self
        s = np.sqrt(np.maximum(a.data, 0.0))
        live = s > 0

        def _backward(g):
            a.grad += np.where(live, g * 0.5 / np.where(live, s, 1.0), 0.0)

        return Tensor._make(s, (a,), "sqrt", _backward)

    def clip(self, low: float, high: float) -> "Tensor":
        """Clamp to [low, high]; only strictly interior entries pass gradient."""
        a = self
        interior = (a.data > low) & (a.data < high)
        _note_kink(interior)

        def _backward(g):
            a.grad += g * interior

        return Tensor._make(np.clip(a.data, low, high), (a,), "clip", _backward)

    def softmax(self, axis: int) -> "Tensor":
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        s = e / e.sum(axis=axis, keepdims=True)

        def _backward(g):
            a.grad += s * (g - (g * s).sum(axis=axis, keepdims=True))

        return Tensor._make(s, (a,), "softmax", _backward)

    # ------------------------------------------------------------------
    # indexing

    def take_rows(self, indices) -> "Tensor":
        a = self
        idx = np.asarray(indices, dtype=np.int64)

        def _backward(g):
            np.add.at(a.grad, idx, g)

        return Tensor._make(a.data[idx], (a,), "take_rows", _backward)

    def gather(self, rows, cols) -> "Tensor":
        """Pick entries ``(rows[n], cols[n])`` into a 1xN row."""
        a = self
        r = np.asarray(rows, dtype=np.int64)
        c = np.asarray(cols, dtype=np.int64)

        def _backward(g):
            np.add.at(a.grad, (r, c), g[0])

        return Tensor._make(a.data[r, c].reshape(1, -1), (a,), "gather", _backward)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data, name: str = "") -> Tensor:
    """A leaf that collects gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise DimensionError("concat needs at least one operand")
    other_axis = 1 - axis
    if len({p.shape[other_axis] for p in parts}) != 1:
        raise DimensionError(f"concat shapes disagree: {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def _backward(g):
        for part, start, stop in zip(parts, bounds[:-1], bounds[1:]):
            if part.requires_grad:
                part.grad += g[:, start:stop] if axis == 1 else g[start:stop, :]

    value = np.concatenate([p.data for p in parts], axis=axis)
    return Tensor._make(value, parts, "concat", _backward)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> dict[str, np.ndarray]:
    """Accumulate d(root)/d(node) into every reachable node's ``grad``.

    Gradients of all reachable nodes are zeroed first, so repeated calls on
    the same graph give identical results. Returns the gradients of named
    leaves.

    Raises:
        ContractError: if ``root`` is not a single value.
    """
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topological_order(root)
    for node in order:
        node.grad = np.zeros_like(node.data)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is None:
            continue
        incoming = node.grad
        factor = _GRADIENT_FAULTS.get(node.op)
        if factor is not None:
            incoming = incoming * factor
        node._backward(incoming)
    return {
        node.name: node.grad
        for node in order
        if node.requires_grad and not node._parents and node.name
    }


@contextmanager
def record_kinks() -> Iterator[list[np.ndarray]]:
    """Collect the active-region pattern of every relu and clip evaluated inside the block.

    Two forward passes with equal patterns are on the same smooth piece, so a
    central difference between them is valid.
    """
    recorder: list[np.ndarray] = []
    _KINK_RECORDERS.append(recorder)
    try:
        yield recorder
    finally:
        _KINK_RECORDERS.remove(recorder)


def same_pattern(first: list[np.ndarray], second: list[np.ndarray]) -> bool:
    return len(first) == len(second) and all(np.array_equal(a, b) for a, b in zip(first, second))


@contextmanager
def corrupt_gradient(op: str, factor: float = 1.5) -> Iterator[None]:
    """Scale the incoming gradient of every ``op`` node while active.

    Only used to prove that the gradient checker detects a wrong rule.
    """
    logger.warning(f"Gradient rule for '{op}' corrupted by factor {factor}")
    _GRADIENT_FAULTS[op] = factor
    try:
        yield
    finally:
        _GRADIENT_FAULTS.pop(op, None)
