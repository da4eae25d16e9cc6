"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array.  Operations on tensors that require
gradients append a node to the active :class:`Tape`; :func:`backward` walks
that tape once in reverse order and accumulates gradients into the leaves.

    >>> tape = Tape()
    >>> with use_tape(tape):
    ...     x = Tensor([1.0, 2.0], requires_grad=True)
    ...     loss = (x * x).sum()
    >>> backward(loss)
    >>> x.grad.tolist()
    [2.0, 4.0]
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "ContractError",
    "backward",
    "no_grad",
    "use_tape",
    "current_tape",
    "grad_enabled",
    "precision",
    "get_dtype",
    "set_dtype",
    "as_tensor",
    "unbroadcast",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A documented precondition of an operation was violated."""


_local = threading.local()
_default_dtype = [np.dtype(np.float32)]


def get_dtype() -> np.dtype:
    return getattr(_local, "dtype", None) or _default_dtype[0]


def set_dtype(dtype) -> None:
    """Set the process-wide default floating dtype (float32 or float64)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype[0] = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype for the current thread."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    prev = getattr(_local, "dtype", None)
    _local.dtype = dtype
    try:
        yield
    finally:
        _local.dtype = prev


class _Node:
    __slots__ = ("parents", "backward_fn")

    def __init__(self, parents, backward_fn):
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of differentiable operations.

    Node ids are list positions, so inputs always precede outputs.  A tape is
    owned by one writer; after :meth:`backward` it must be :meth:`reset`
    before recording again.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __len__(self):
        return len(self.nodes)

    def record(self, out: "Tensor", parents: Sequence["Tensor"], backward_fn: Callable) -> "Tensor":
        if self.consumed:
            raise ContractError("tape already consumed by backward(); call reset() first")
        out.node = len(self.nodes)
        out.tape = self
        out.requires_grad = True
        self.nodes.append(_Node(tuple(parents), backward_fn))
        return out

    def reset(self) -> None:
        self.nodes = []
        self.consumed = False

    def backward(self, loss: "Tensor", grad: Optional[np.ndarray] = None) -> None:
        if loss.tape is not self:
            raise ContractError("loss was not recorded on this tape")
        if grad is None:
            if loss.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        grads: list[Optional[np.ndarray]] = [None] * len(self.nodes)
        grads[loss.node] = np.asarray(grad, dtype=loss.data.dtype)
        for nid in range(loss.node, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            grads[nid] = None
            node = self.nodes[nid]
            pgrads = node.backward_fn(g)
            for parent, pg in zip(node.parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.tape is self:
                    cur = grads[parent.node]
                    grads[parent.node] = pg if cur is None else cur + pg
                elif parent.node is None:
                    parent._accumulate(pg)
                else:
                    raise ContractError("tensor from another tape used as an input")
        self.consumed = True


def _default_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None or (tape.consumed and getattr(_local, "implicit", True)):
        tape = Tape()
        _local.tape = tape
    return tape


def current_tape() -> Tape:
    return _default_tape()


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


@contextlib.contextmanager
def use_tape(tape: Optional[Tape] = None):
    """Record operations in this block on ``tape`` (a fresh one if omitted)."""
    tape = Tape() if tape is None else tape
    prev = getattr(_local, "tape", None)
    prev_enabled = grad_enabled()
    prev_implicit = getattr(_local, "implicit", True)
    _local.tape = tape
    _local.implicit = False
    _local.grad_enabled = True
    try:
        yield tape
    finally:
        _local.tape = prev
        _local.implicit = prev_implicit
        _local.grad_enabled = prev_enabled


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    ndim_extra = g.ndim - len(shape)
    if ndim_extra > 0:
        g = g.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """A numpy array plus the bookkeeping reverse-mode AD needs."""

    __slots__ = ("data", "requires_grad", "grad", "node", "tape", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data).astype(dtype, copy=False)
        elif isinstance(data, np.ndarray) and data.dtype.kind == "f":
            arr = data
        else:
            arr = np.asarray(data, dtype=get_dtype())
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[int] = None
        self.tape: Optional[Tape] = None
        self.name = name

    # --- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        g = unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4, threshold=8)}{flag})"

    def __len__(self):
        return len(self.data)

    def backward(self) -> None:
        backward(self)

    # operator overloads are attached in ops.py


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is None:
        dtype = get_dtype()
    return Tensor(arr.astype(dtype, copy=False))


def record(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``out_data`` and record it if any parent needs a gradient."""
    out = Tensor(out_data, dtype=out_data.dtype)
    if grad_enabled() and any(p.requires_grad for p in parents):
        _default_tape().record(out, parents, backward_fn)
    return out


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on."""
    if loss.tape is None:
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        return
    loss.tape.backward(loss, grad)
