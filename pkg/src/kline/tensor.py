"""A small reverse-mode autodiff engine over float64 numpy arrays.

Every op builds a node holding its inputs and a closure that routes the
output gradient back to them; ``Tensor.backward`` walks the graph once in
reverse topological order.  Gradients accumulate additively when a tensor
feeds several consumers.  All payloads are float64: the finite-difference
oracles in the test suite need the headroom.

Graph recording can be suspended with ``no_grad()`` for inference paths.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError

__all__ = [
    "Tensor",
    "tensor",
    "no_grad",
    "concat",
    "where",
    "embedding_lookup",
    "take_along_last",
    "straight_through",
]

# Grad mode is per-thread: concurrent inference workers each toggle their own
# flag, so overlapping no_grad() blocks can never disable recording in another
# thread (a process-global flag is corrupted by interleaved enter/exit).
_GRAD_STATE = threading.local()


def _grad_enabled() -> bool:
    return getattr(_GRAD_STATE, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Suspend graph recording in this thread; ops inside return constants."""
    prev = _grad_enabled()
    _GRAD_STATE.enabled = False
    try:
        yield
    finally:
        _GRAD_STATE.enabled = prev


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array plus the bookkeeping reverse-mode autodiff needs."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def _node(data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        requires = _grad_enabled() and any(p.requires_grad for p in parents)
        out = Tensor(data, requires)
        if requires:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, grad: np.ndarray) -> None:
        # Accumulation always allocates, so sharing the first grad array
        # between siblings is safe: nothing ever mutates one in place.
        if self.grad is None:
            self.grad = grad
        else:
            self.grad = self.grad + grad

    # -- basics ----------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = _ensure_tensor(other)
        out_data = self.data + other.data

        def backward(grad: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(_unbroadcast(grad, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(grad, other.data.shape))

        return Tensor._node(out_data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        def backward(grad: np.ndarray) -> None:
            self._accumulate(-grad)

        return Tensor._node(-self.data, (self,), backward)

    def __sub__(self, other) -> "Tensor":
        other = _ensure_tensor(other)
        out_data = self.data - other.data

        def backward(grad: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(_unbroadcast(grad, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-grad, other.data.shape))

        return Tensor._node(out_data, (self, other), backward)

    def __rsub__(self, other) -> "Tensor":
        return _ensure_tensor(other).__sub__(self)

    def __mul__(self, other) -> "Tensor":
        other = _ensure_tensor(other)
        out_data = self.data * other.data

        def backward(grad: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(_unbroadcast(grad * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(grad * self.data, other.data.shape))

        return Tensor._node(out_data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _ensure_tensor(other)
        out_data = self.data / other.data

        def backward(grad: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(_unbroadcast(grad / other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(
                    _unbroadcast(-grad * self.data / (other.data * other.data), other.data.shape)
                )

        return Tensor._node(out_data, (self, other), backward)

    def __rtruediv__(self, other) -> "Tensor":
        return _ensure_tensor(other).__truediv__(self)

    def __matmul__(self, other) -> "Tensor":
        other = _ensure_tensor(other)
        if self.data.ndim < 2 or other.data.ndim < 2:
            raise ShapeError(
                f"matmul requires >=2-d operands, got {self.data.shape} @ {other.data.shape}"
            )
        if self.data.shape[-1] != other.data.shape[-2]:
            raise ShapeError(f"matmul mismatch: {self.data.shape} @ {other.data.shape}")
        out_data = self.data @ other.data

        def backward(grad: np.ndarray) -> None:
            if self.requires_grad:
                ga = grad @ np.swapaxes(other.data, -1, -2)
                self._accumulate(_unbroadcast(ga, self.data.shape))
            if other.requires_grad:
                gb = np.swapaxes(self.data, -1, -2) @ grad
                other._accumulate(_unbroadcast(gb, other.data.shape))

        return Tensor._node(out_data, (self, other), backward)

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src_shape = self.data.shape
        out_data = self.data.reshape(shape)

        def backward(grad: np.ndarray) -> None:
            self._accumulate(grad.reshape(src_shape))

        return Tensor._node(out_data, (self,), backward)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        out_data = np.swapaxes(self.data, a, b)

        def backward(grad: np.ndarray) -> None:
            self._accumulate(np.swapaxes(grad, a, b))

        return Tensor._node(out_data, (self,), backward)

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        out_data = self.data.transpose(axes)

        def backward(grad: np.ndarray) -> None:
            self._accumulate(grad.transpose(inverse))

        return Tensor._node(out_data, (self,), backward)

    def broadcast_to(self, shape: tuple[int, ...]) -> "Tensor":
        src_shape = self.data.shape
        out_data = np.broadcast_to(self.data, shape)

        def backward(grad: np.ndarray) -> None:
            self._accumulate(_unbroadcast(grad, src_shape))

        return Tensor._node(out_data, (self,), backward)

    def __getitem__(self, key) -> "Tensor":
        out_data = self.data[key]
        src_shape = self.data.shape
        parts = key if isinstance(key, tuple) else (key,)
        # integer-array keys may repeat positions; += would drop duplicates
        fancy = any(isinstance(p, (np.ndarray, list)) for p in parts)

        def backward(grad: np.ndarray) -> None:
            full = np.zeros(src_shape, dtype=np.float64)
            if fancy:
                np.add.at(full, key, grad)
            else:
                full[key] += grad
            self._accumulate(full)

        return Tensor._node(out_data, (self,), backward)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        src_shape = self.data.shape

        def backward(grad: np.ndarray) -> None:
            self._accumulate(_expand_reduced(grad, src_shape, axis, keepdims))

        return Tensor._node(out_data, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.mean(axis=axis, keepdims=keepdims)
        src_shape = self.data.shape
        count = self.data.size if axis is None else _axis_size(src_shape, axis)

        def backward(grad: np.ndarray) -> None:
            self._accumulate(_expand_reduced(grad, src_shape, axis, keepdims) / count)

        return Tensor._node(out_data, (self,), backward)

    # -- elementwise nonlinearities -------------------------------------------

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def backward(grad: np.ndarray) -> None:
            self._accumulate(grad * out_data)

        return Tensor._node(out_data, (self,), backward)

    def log(self) -> "Tensor":
        out_data = np.log(self.data)

        def backward(grad: np.ndarray) -> None:
            self._accumulate(grad / self.data)

        return Tensor._node(out_data, (self,), backward)

    def sqrt(self) -> "Tensor":
        out_data = np.sqrt(self.data)

        def backward(grad: np.ndarray) -> None:
            self._accumulate(grad / (2.0 * out_data))

        return Tensor._node(out_data, (self,), backward)

    def tanh(self) -> "Tensor":
        out_data = np.tanh(self.data)

        def backward(grad: np.ndarray) -> None:
            self._accumulate(grad * (1.0 - out_data * out_data))

        return Tensor._node(out_data, (self,), backward)

    def sigmoid(self) -> "Tensor":
        # exp(-|x|) never overflows; both branches share it.
        e = np.exp(-np.abs(self.data))
        out_data = np.where(self.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

        def backward(grad: np.ndarray) -> None:
            self._accumulate(grad * out_data * (1.0 - out_data))

        return Tensor._node(out_data, (self,), backward)

    def silu(self) -> "Tensor":
        return self * self.sigmoid()

    # -- softmax family --------------------------------------------------------

    def softmax(self, axis: int = -1) -> "Tensor":
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)

        def backward(grad: np.ndarray) -> None:
            inner = (grad * out_data).sum(axis=axis, keepdims=True)
            self._accumulate(out_data * (grad - inner))

        return Tensor._node(out_data, (self,), backward)

    def logsumexp(self, axis: int = -1) -> "Tensor":
        m = self.data.max(axis=axis, keepdims=True)
        e = np.exp(self.data - m)
        s = e.sum(axis=axis, keepdims=True)
        out_data = np.squeeze(np.log(s) + m, axis=axis)
        soft = e / s

        def backward(grad: np.ndarray) -> None:
            self._accumulate(np.expand_dims(grad, axis) * soft)

        return Tensor._node(out_data, (self,), backward)

    # -- autodiff driver -------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar; accumulates into ``.grad`` fields."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad:
            raise ValueError("backward on a tensor that does not require grad")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _ensure_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _axis_size(shape: tuple[int, ...], axis) -> int:
    if isinstance(axis, int):
        return shape[axis]
    size = 1
    for a in axis:
        size *= shape[a]
    return size


def _expand_reduced(grad: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    """Broadcast a reduced gradient back to the pre-reduction shape."""
    if axis is None:
        return np.broadcast_to(grad.reshape((1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            grad = np.expand_dims(grad, a)
    return np.broadcast_to(grad, shape)


# -- free functions -------------------------------------------------------------


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    parts = [_ensure_tensor(t) for t in tensors]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(grad: np.ndarray) -> None:
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if part.requires_grad:
                index: list = [slice(None)] * grad.ndim
                index[axis] = slice(lo, hi)
                part._accumulate(grad[tuple(index)])

    return Tensor._node(out_data, parts, backward)


def where(condition: np.ndarray, on_true, on_false) -> Tensor:
    """Elementwise select; the condition is data, never differentiated."""
    cond = np.asarray(condition, dtype=bool)
    a = _ensure_tensor(on_true)
    b = _ensure_tensor(on_false)
    out_data = np.where(cond, a.data, b.data)

    def backward(grad: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(cond, grad, 0.0), a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(cond, 0.0, grad), b.data.shape))

    return Tensor._node(out_data, (a, b), backward)


def embedding_lookup(table: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of a [V x d] table; grads scatter-add back by row."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError(f"embedding indices must be integers, got {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError(
            f"embedding index out of range [0, {table.data.shape[0]}): "
            f"min={idx.min()} max={idx.max()}"
        )
    out_data = table.data[idx]

    def backward(grad: np.ndarray) -> None:
        full = np.zeros_like(table.data)
        np.add.at(full, idx, grad)
        table._accumulate(full)

    return Tensor._node(out_data, (table,), backward)


def take_along_last(x: Tensor, indices: np.ndarray) -> Tensor:
    """Pick one entry per row along the last axis (cross-entropy gather)."""
    idx = np.asarray(indices)
    if idx.shape != x.data.shape[:-1]:
        raise ShapeError(f"index shape {idx.shape} must match leading dims of {x.data.shape}")
    expanded = np.expand_dims(idx, -1)
    out_data = np.take_along_axis(x.data, expanded, axis=-1).squeeze(-1)

    def backward(grad: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        np.put_along_axis(full, expanded, np.expand_dims(grad, -1), axis=-1)
        x._accumulate(full)

    return Tensor._node(out_data, (x,), backward)


def straight_through(x: Tensor, quantized) -> Tensor:
    """Forward the quantized values, route gradients straight to ``x``.

    The quantizer's output is treated as a constant; only the shape must
    agree with ``x``.
    """
    q = quantized.data if isinstance(quantized, Tensor) else _as_array(quantized)
    if q.shape != x.data.shape:
        raise ShapeError(f"straight_through shapes differ: {x.data.shape} vs {q.shape}")
    return x + Tensor(q - x.data)
