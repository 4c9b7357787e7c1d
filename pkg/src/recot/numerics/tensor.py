"""Dense tensors and the reverse-mode tape.

A ``Tensor`` is a thin wrapper over a C-contiguous numpy array holding real
values in either float32 (training) or float64 (verification) precision.
``Node`` records how a value was produced so that ``backward`` can replay the
tape in reverse topological order.  Ops live in :mod:`recot.numerics.ops` and
attach a closure per output node; constant subgraphs record nothing.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "NonFiniteError",
    "ShapeError",
    "backward",
    "constant",
    "default_dtype",
    "use_dtype",
    "no_grad",
    "grad_enabled",
    "finite_checks",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class NonFiniteError(FloatingPointError):
    """Raised when a kernel produces NaN or Inf."""


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an op contract."""


class _ModeState(threading.local):
    """Graph-construction modes, one set per thread.

    Evaluation fans out over a thread pool; a shared flag dict would let one
    worker's no_grad exit clobber another's saved value and leave the whole
    process in forward-only mode.  Thread-local storage gives every thread
    the defaults below plus its own nesting.
    """

    def __init__(self):
        self.dtype = np.float32
        self.grad = True
        self.finite = True


_state = _ModeState()


def default_dtype() -> type:
    """Dtype used for newly created parameters and constants."""
    return _state.dtype


@contextmanager
def use_dtype(dtype) -> Iterator[None]:
    """Build parameters/constants in ``dtype`` within the block.

    Precision is a property of construction: a graph built under
    ``use_dtype(np.float64)`` runs end to end in 64-bit.
    """
    if dtype not in _FLOAT_DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}; expected float32 or float64")
    prev = _state.dtype
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = prev


def grad_enabled() -> bool:
    return _state.grad


@contextmanager
def no_grad() -> Iterator[None]:
    """Skip tape recording inside the block (forward-only evaluation)."""
    prev = _state.grad
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    prev = _state.finite
    _state.finite = enabled
    try:
        yield
    finally:
        _state.finite = prev


def _check_finite(arr: np.ndarray, context: str) -> None:
    if not _state.finite:
        return
    # Cheap probe first: a finite sum implies all entries finite at our scales.
    if np.isfinite(arr.sum()):
        return
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {context}")


class Tensor:
    """Shape plus row-major real data."""

    __slots__ = ("array",)

    def __init__(self, array, dtype=None, context: str = "tensor"):
        arr = np.asarray(array)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(_state.dtype)
        arr = np.ascontiguousarray(arr)
        _check_finite(arr, context)
        self.array = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def ndim(self) -> int:
        return self.array.ndim

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def dtype(self):
        return self.array.dtype

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the values."""
        return self.array.reshape(-1)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


class Node:
    """One tape entry: a value, its gradient slot, and the producing op."""

    __slots__ = ("value", "grad", "parents", "_backward", "requires_grad")

    def __init__(
        self,
        value: Tensor,
        parents: Sequence["Node"] = (),
        backward_fn: Callable[[np.ndarray], None] | None = None,
        requires_grad: bool = False,
    ):
        self.value = value
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self._backward = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def array(self) -> np.ndarray:
        return self.value.array

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.value.array.reshape(()))

    def accumulate(self, g: np.ndarray) -> None:
        # Never mutates in place: aliases with child gradients stay safe.
        self.grad = g if self.grad is None else self.grad + g

    def __repr__(self) -> str:
        tag = "param" if (self.requires_grad and not self.parents) else "node"
        return f"Node({tag}, shape={self.shape})"


def constant(value, dtype=None) -> Node:
    """Wrap a raw value as a leaf that does not require gradients."""
    return Node(Tensor(value, dtype=dtype, context="constant"))


def lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node, seed: float = 1.0) -> None:
    """Propagate d(loss)/d(node) through the tape.

    Gradients accumulate into ``Node.grad``; parameter grads survive until
    explicitly zeroed, so per-sample backward calls within a batch sum.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any parameter")
    order = _toposort(loss)
    loss.accumulate(np.full(loss.value.shape, seed, dtype=loss.value.dtype))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def needs_grad(*nodes: Node) -> bool:
    """True when the tape is live and any operand requires gradients."""
    return _state.grad and any(n.requires_grad for n in nodes)
