"""
Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation returns a new `Tensor`; when any input requires a gradient the
result records its parents and a closure mapping the output adjoint to the
input adjoints. The recorded parent links form the graph that `backward`
replays in reverse topological order, visiting every node exactly once.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from sanmove.src.errors import ShapeError

GradFn = Callable[[NDArray[np.float64]], Sequence[Optional[NDArray[np.float64]]]]


class Tensor:
    """
    Dense n-dimensional value with an optional gradient.

    Parameters
    ----------
    data : array-like
        Values, copied into a contiguous row-major float64 array.
    requires_grad : bool, default=False
        Whether `backward` should populate `grad` for this tensor.
    name : str, optional
        Label used by checkpoints and error messages.
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.grad: Optional[NDArray[np.float64]] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Optional[GradFn] = None

    @classmethod
    def _result(
        cls,
        data: NDArray[np.float64],
        parents: tuple["Tensor", ...],
        grad_fn: GradFn,
    ) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data, dtype=np.float64)
        out.grad = None
        out.name = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = parents if out.requires_grad else ()
        out._grad_fn = grad_fn if out.requires_grad else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> NDArray[np.float64]:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        return add(self, other)

    def __sub__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    rank = max(len(a), len(b))
    pa = (1,) * (rank - len(a)) + a
    pb = (1,) * (rank - len(b)) + b
    shape = []
    for x, y in zip(pa, pb):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"cannot broadcast shapes {a} and {b}")
        shape.append(max(x, y))
    return tuple(shape)


def _unbroadcast(grad: NDArray[np.float64], shape: tuple[int, ...]) -> NDArray[np.float64]:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), grad_fn)


def sub(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), grad_fn)


def mul(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    """Elementwise product with the same broadcasting rule as `add`."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), grad_fn)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return Tensor._result(x.data * s, (x,), lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product of a [m x k] and b [k x n].

    Raises
    ------
    ShapeError
        If either operand is not a matrix or the inner extents differ.
    """
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._result(a.data @ b.data, (a, b), grad_fn)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {x.shape}")
    return Tensor._result(x.data.T, (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    original = x.shape
    return Tensor._result(x.data.reshape(shape), (x,), lambda g: (g.reshape(original),))


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    active = x.data > 0
    return Tensor._result(x.data * active, (x,), lambda g: (g * active,))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor._result(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._result(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor._result(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return Tensor._result(np.log(x.data), (x,), lambda g: (g / x.data,))


def softmax(
    x: Tensor,
    axis: int = -1,
    mask: Optional[NDArray[np.bool_]] = None,
) -> Tensor:
    """
    Numerically stable softmax along `axis`.

    Positions where `mask` is False are treated as -inf logits and receive
    exactly zero weight.

    Raises
    ------
    ValueError
        If the mask leaves a slice with no valid position.
    """
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("softmax over a fully masked row: no valid key")
        z = np.where(mask, z, -np.inf)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._result(y, (x,), grad_fn)


def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    shape = x.shape

    def grad_fn(g):
        if axis is None:
            return (np.full(shape, float(np.asarray(g).reshape(-1)[0])),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    out = x.data.sum() if axis is None else x.data.sum(axis=axis)
    return Tensor._result(np.asarray(out), (x,), grad_fn)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis), 1.0 / count)


def gather_rows(table: Tensor, indices: ArrayLike) -> Tensor:
    """
    Row lookup `table[indices]`; the adjoint scatter-adds into the table so
    repeated indices accumulate.

    Raises
    ------
    IndexError
        If any index falls outside [0, rows).
    """
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise IndexError(f"gather index out of range [0, {rows}): {idx.tolist()}")

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._result(table.data[idx], (table,), grad_fn)


def pick(x: Tensor, rows: ArrayLike, cols: ArrayLike) -> Tensor:
    """Elements x[rows[i], cols[i]] as a vector."""
    r = np.asarray(rows, dtype=np.int64)
    c = np.asarray(cols, dtype=np.int64)

    def grad_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (r, c), g)
        return (full,)

    return Tensor._result(x.data[r, c], (x,), grad_fn)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return Tensor._result(x.data[start:stop], (x,), grad_fn)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return Tensor._result(x.data[:, start:stop], (x,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    extents = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(extents)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._result(data, tuple(tensors), grad_fn)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from `root`, parents before children."""
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


def _adjoints(loss: Tensor) -> tuple[list[Tensor], dict[int, NDArray[np.float64]]]:
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topological_order(loss)
    adjoints = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = adjoints.get(id(node))
        if g is None or node._grad_fn is None:
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in adjoints:
                adjoints[id(parent)] = adjoints[id(parent)] + pg
            else:
                adjoints[id(parent)] = np.asarray(pg, dtype=np.float64)
    return order, adjoints


def backward(loss: Tensor) -> None:
    """
    Accumulate d(loss)/d(node) into `grad` of every node that requires it.

    Raises
    ------
    ShapeError
        If `loss` is not a scalar.
    """
    order, adjoints = _adjoints(loss)
    for node in order:
        if not node.requires_grad or id(node) not in adjoints:
            continue
        g = adjoints[id(node)].reshape(node.shape)
        node.grad = g.copy() if node.grad is None else node.grad + g


def gradients(loss: Tensor, params: Iterable[Tensor]) -> list[NDArray[np.float64]]:
    """
    Gradients of `loss` w.r.t. `params` without touching their `grad` fields.

    Used by worker threads that share parameter tensors.
    """
    _, adjoints = _adjoints(loss)
    return [
        adjoints[id(p)].reshape(p.shape).copy()
        if id(p) in adjoints
        else np.zeros_like(p.data)
        for p in params
    ]


def numeric_gradient(
    f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5
) -> NDArray[np.float64]:
    """Central-difference gradient of scalar `f` at `x` (x.data is restored)."""
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    out = numeric.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        f_plus = f(x).item()
        flat[i] = original - eps
        f_minus = f(x).item()
        flat[i] = original
        out[i] = (f_plus - f_minus) / (2.0 * eps)
    return numeric


def grad_check(
    f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5
) -> float:
    """
    Max relative error between backward gradients and central differences.

    Returns
    -------
    float
        max_i |a_i - n_i| / max(1e-8, |a_i| + |n_i|)
    """
    x.grad = None
    backward(f(x))
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    analytic = analytic.copy()
    numeric = numeric_gradient(f, x, eps)
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))


def global_norm(arrays: Iterable[NDArray[np.float64]]) -> float:
    return math.sqrt(float(np.sum([np.sum(a * a) for a in arrays])))
