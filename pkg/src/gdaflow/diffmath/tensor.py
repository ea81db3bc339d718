"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation on a :class:`Tensor` that has a differentiable input records its parents
and a backward rule; :meth:`Tensor.backward` replays the recorded graph in reverse
topological order and accumulates gradients on the leaves. Operations whose inputs are
all constants record nothing, so evaluation-only code pays no graph overhead.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from typing import Any

import numpy as np
from scipy.special import expit
from scipy.special import logsumexp as _np_logsumexp

from ..errors import GdaFlowError

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


def _is_basic_index(index: Any) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(
        item is None or item is Ellipsis or isinstance(item, (int, np.integer, slice))
        for item in items
    )


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An array value plus the information needed to differentiate through it."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")
    __array_ufunc__ = None  # ndarray <op> Tensor defers to Tensor's reflected operators

    def __init__(self, data: Any, requires_grad: bool = False, *, op: str = "") -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    # construction ---------------------------------------------------------------

    @staticmethod
    def lift(value: Any) -> Tensor:
        return value if isinstance(value, Tensor) else Tensor(value)

    @staticmethod
    def _record(
        data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn, op: str
    ) -> Tensor:
        out = Tensor(data, op=op)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # arithmetic -----------------------------------------------------------------

    def __add__(self, other: Any) -> Tensor:
        other = Tensor.lift(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._record(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
            "add",
        )

    __radd__ = __add__

    def __neg__(self) -> Tensor:
        return Tensor._record(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other: Any) -> Tensor:
        other = Tensor.lift(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._record(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
            "sub",
        )

    def __rsub__(self, other: Any) -> Tensor:
        return Tensor.lift(other) - self

    def __mul__(self, other: Any) -> Tensor:
        other = Tensor.lift(other)
        a, b = self.data, other.data
        return Tensor._record(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> Tensor:
        other = Tensor.lift(other)
        a, b = self.data, other.data
        return Tensor._record(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
            "div",
        )

    def __rtruediv__(self, other: Any) -> Tensor:
        return Tensor.lift(other) / self

    def __pow__(self, exponent: float) -> Tensor:
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        a = self.data
        return Tensor._record(
            a**exponent,
            (self,),
            lambda g: (g * exponent * a ** (exponent - 1),),
            "pow",
        )

    def __matmul__(self, other: Any) -> Tensor:
        other = Tensor.lift(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise GdaFlowError(
                "matmul operands must be at least 2-D",
                code="SHAPE_MISMATCH",
                context={"left": list(a.shape), "right": list(b.shape)},
            )

        def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            return (
                _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape),
                _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape),
            )

        return Tensor._record(a @ b, (self, other), backward, "matmul")

    def __rmatmul__(self, other: Any) -> Tensor:
        return Tensor.lift(other) @ self

    # shape ----------------------------------------------------------------------

    def __getitem__(self, index: Any) -> Tensor:
        shape = self.shape
        basic = _is_basic_index(index)

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            full = np.zeros(shape)
            if basic:
                full[index] = g
            else:
                np.add.at(full, index, g)
            return (full,)

        return Tensor._record(self.data[index], (self,), backward, "getitem")

    def reshape(self, *shape: int) -> Tensor:
        original = self.shape
        return Tensor._record(
            self.data.reshape(*shape), (self,), lambda g: (g.reshape(original),), "reshape"
        )

    def swapaxes(self, axis1: int, axis2: int) -> Tensor:
        return Tensor._record(
            np.swapaxes(self.data, axis1, axis2),
            (self,),
            lambda g: (np.swapaxes(g, axis1, axis2),),
            "swapaxes",
        )

    @property
    def T(self) -> Tensor:  # noqa: N802 - numpy naming
        return self.swapaxes(-1, -2)

    # reductions -----------------------------------------------------------------

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        shape = self.shape

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._record(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward, "sum")

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        total = self.sum(axis=axis, keepdims=keepdims)
        count = self.data.size // max(total.data.size, 1)
        return total / float(count)

    # backprop -------------------------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every differentiable leaf."""

        if self.data.size != 1:
            raise GdaFlowError(
                "backward() needs a scalar loss",
                code="NON_SCALAR_LOSS",
                context={"shape": list(self.shape)},
            )
        if not self.requires_grad:
            return
        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g), strict=True):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + parent_grad if key in pending else parent_grad


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative post-order: unrolled ODE graphs are far deeper than the recursion limit
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
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


# elementwise functions ----------------------------------------------------------


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._record(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    a = x.data
    return Tensor._record(np.log(a), (x,), lambda g: (g / a,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor._record(out, (x,), lambda g: (g / (2.0 * out),), "sqrt")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._record(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return Tensor._record(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    a = x.data
    return Tensor._record(np.logaddexp(0.0, a), (x,), lambda g: (g * expit(a),), "softplus")


def relu(x: Tensor) -> Tensor:
    mask = (x.data > 0).astype(np.float64)
    return Tensor._record(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = x.data
    out = _np_logsumexp(a, axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.exp(a - out),)

    value = out if keepdims else np.squeeze(out, axis=axis)
    return Tensor._record(value, (x,), backward, "logsumexp")


# structure ----------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(Tensor.lift(t) for t in tensors)
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g: np.ndarray) -> list[np.ndarray]:
        return np.split(g, cuts, axis=axis)

    return Tensor._record(
        np.concatenate([p.data for p in parts], axis=axis), parts, backward, "concat"
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(Tensor.lift(t) for t in tensors)

    def backward(g: np.ndarray) -> list[np.ndarray]:
        return [np.take(g, i, axis=axis) for i in range(len(parts))]

    return Tensor._record(np.stack([p.data for p in parts], axis=axis), parts, backward, "stack")


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over rows of -log softmax(logits)[label]; ``labels`` are 0-based class indices."""

    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(logits.shape[0])
    picked = logits[rows, labels]
    return (logsumexp(logits, axis=-1) - picked).mean()


__all__ = [
    "Tensor",
    "concat",
    "exp",
    "log",
    "logsumexp",
    "relu",
    "sigmoid",
    "softmax_cross_entropy",
    "softplus",
    "sqrt",
    "stack",
    "tanh",
]
