"""
Dense tensor with reverse-mode automatic differentiation.

A Tensor wraps a row-major numpy array (float32 or float64). Operations that
involve a tensor with ``requires_grad`` record their parents and a backward
closure; ``Tensor.backward()`` walks the graph in reverse topological order
and accumulates gradients into the leaves.

This module holds the graph machinery plus the arithmetic and shape
primitives behind the Python operators. Neural-network kernels live in
``nearquery.numcore.ops``.
"""
import logging
from contextlib import contextmanager
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from nearquery.exceptions import NearQueryError, ShapeError

logger = logging.getLogger(__name__)

DTYPES = {"f32": np.float32, "f64": np.float64}

_grad_enabled = True

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction inside the block"""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


def resolve_dtype(dtype: Union[str, np.dtype, type, None]) -> np.dtype:
    """Map "f32"/"f64" (or a numpy float dtype) to a numpy dtype"""
    if dtype is None:
        return np.dtype(np.float32)
    if isinstance(dtype, str) and dtype in DTYPES:
        return np.dtype(DTYPES[dtype])
    resolved = np.dtype(dtype)
    if resolved not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise NearQueryError(f"unsupported tensor dtype {dtype!r}; use f32 or f64")
    return resolved


def dtype_name(dtype: np.dtype) -> str:
    return "f64" if np.dtype(dtype) == np.float64 else "f32"


def _contiguous(arr: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d arrays to 1-d
    return arr if arr.flags.c_contiguous else arr.copy(order="C")


class Tensor:
    """N-dimensional float array with an optional autodiff graph node"""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype: Union[str, np.dtype, None] = None,
        name: Optional[str] = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(resolve_dtype(dtype), copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = _contiguous(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward: BackwardFn,
    ) -> "Tensor":
        out = cls.__new__(cls)
        out.data = _contiguous(np.asarray(data))
        out.grad = None
        out.name = None
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- properties -----------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return (
            f"Tensor(shape={self.shape}, dtype={dtype_name(self.dtype)}, "
            f"requires_grad={self.requires_grad}{label})"
        )

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff -------------------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Back-propagate from this tensor into every reachable leaf.

        Without an explicit ``grad`` the tensor must be a scalar (one element).
        """
        if grad is None:
            if self.size != 1:
                raise ShapeError(
                    f"backward: loss must be a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise ShapeError(
                    f"backward: seed gradient shape {grad.shape} != tensor shape {self.shape}"
                )
        if not self.requires_grad:
            return

        pending = {id(self): grad}
        for node in reversed(_topological_order(self)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                g = g.astype(node.dtype, copy=False)
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- operators ------------------------------------------------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    # -- shape / reduction shortcuts --------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def flatten(self, start: int = 0) -> "Tensor":
        head = self.shape[:start]
        return reshape(self, head + (-1,))


def tensor(
    data: ArrayLike,
    dtype: Union[str, np.dtype, None] = "f32",
    requires_grad: bool = False,
    name: Optional[str] = None,
) -> Tensor:
    """Create a tensor (defaults to f32)"""
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _topological_order(root: Tensor) -> List[Tensor]:
    """Parents-before-children order of the nodes reachable from root"""
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
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


# ---------------------------------------------------------------------------
# Operand handling
# ---------------------------------------------------------------------------

def as_tensor(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    """Wrap constants as non-differentiable tensors in ``like``'s dtype"""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype) if dtype is not None else value)


def _pair(a: ArrayLike, b: ArrayLike, primitive: str) -> Tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    ta, tb = as_tensor(a, like), as_tensor(b, like)
    if ta.dtype != tb.dtype:
        raise ShapeError(
            f"{primitive}: dtype mismatch {dtype_name(ta.dtype)} vs {dtype_name(tb.dtype)}"
        )
    return ta, tb


def _broadcast_shape(a: Tensor, b: Tensor, primitive: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{primitive}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = _pair(a, b, "add")
    _broadcast_shape(ta, tb, "add")

    def backward(g):
        return unbroadcast(g, ta.shape), unbroadcast(g, tb.shape)

    return Tensor._from_op(ta.data + tb.data, (ta, tb), backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = _pair(a, b, "sub")
    _broadcast_shape(ta, tb, "sub")

    def backward(g):
        return unbroadcast(g, ta.shape), unbroadcast(-g, tb.shape)

    return Tensor._from_op(ta.data - tb.data, (ta, tb), backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = _pair(a, b, "mul")
    _broadcast_shape(ta, tb, "mul")

    def backward(g):
        ga = unbroadcast(g * tb.data, ta.shape) if ta.requires_grad else None
        gb = unbroadcast(g * ta.data, tb.shape) if tb.requires_grad else None
        return ga, gb

    return Tensor._from_op(ta.data * tb.data, (ta, tb), backward)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = _pair(a, b, "div")
    _broadcast_shape(ta, tb, "div")
    out = ta.data / tb.data

    def backward(g):
        ga = unbroadcast(g / tb.data, ta.shape) if ta.requires_grad else None
        gb = unbroadcast(-g * out / tb.data, tb.shape) if tb.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (ta, tb), backward)


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)

    def backward(g):
        return (g * p * np.power(a.data, p - 1.0),)

    return Tensor._from_op(np.power(a.data, p), (a,), backward)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match or b is 2-D"""
    ta, tb = _pair(a, b, "matmul")
    if ta.ndim < 2 or tb.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {ta.shape} and {tb.shape}")
    if ta.shape[-1] != tb.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {ta.shape} @ {tb.shape}")
    if tb.ndim > 2 and ta.shape[:-2] != tb.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ, {ta.shape} @ {tb.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(tb.data, -1, -2)) if ta.requires_grad else None
        gb = None
        if tb.requires_grad:
            gb = np.matmul(np.swapaxes(ta.data, -1, -2), g)
            gb = unbroadcast(gb, tb.shape)
        return ga, gb

    return Tensor._from_op(np.matmul(ta.data, tb.data), (ta, tb), backward)


# ---------------------------------------------------------------------------
# Shape primitives and reductions
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort([ax % a.ndim for ax in axes]))
    return Tensor._from_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return Tensor._from_op(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / max(count, 1))


def _is_basic_index(index) -> bool:
    """Ints and slices only: every selected element appears once"""
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis for i in items)


def getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    out = a.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.array(out, copy=True), (a,), backward)


__all__ = [
    "Tensor",
    "tensor",
    "as_tensor",
    "no_grad",
    "is_grad_enabled",
    "resolve_dtype",
    "dtype_name",
    "unbroadcast",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "matmul",
    "reshape",
    "transpose",
    "sum_",
    "mean",
    "getitem",
]
