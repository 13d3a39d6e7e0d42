"""Tensor, tape and precision state for the reverse-mode engine."""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shapes."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class StaleTapeError(RuntimeError):
    pass


def get_default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported float width: {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float width (``"float64"`` for verification)."""
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Node:
    __slots__ = ("op", "inputs", "backward_fn", "generation", "index")

    def __init__(self, op, inputs, backward_fn, generation, index):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.generation = generation
        self.index = index


class Tape:
    """Append-only record of differentiable ops.

    Append order is a valid topological order, since an op can only consume
    tensors that already exist. ``clear`` bumps the generation so any tensor
    still pointing at an old node is detected as stale.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.generation = 0

    def record(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable) -> Node:
        node = Node(op, tuple(inputs), backward_fn, self.generation, len(self.nodes))
        self.nodes.append(node)
        return node

    def clear(self) -> None:
        self.nodes = []
        self.generation += 1

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


_TAPE_STACK: list[Tape] = [Tape()]


def active_tape() -> Tape:
    return _TAPE_STACK[-1]


class Tensor:
    """n-dimensional float array with an optional gradient slot and tape link."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.ascontiguousarray(np.asarray(data, dtype=dtype or _DTYPE))
        if not arr.flags.writeable:
            arr = arr.copy()
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    # -- array-like surface -------------------------------------------------
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

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # -- operators (implemented in functional) ------------------------------
    def __add__(self, other):
        return F.add(self, other)

    def __radd__(self, other):
        return F.add(other, self)

    def __sub__(self, other):
        return F.sub(self, other)

    def __rsub__(self, other):
        return F.sub(other, self)

    def __mul__(self, other):
        return F.mul(self, other)

    def __rmul__(self, other):
        return F.mul(other, self)

    def __truediv__(self, other):
        return F.div(self, other)

    def __neg__(self):
        return F.scale(self, -1.0)

    def __matmul__(self, other):
        return F.matmul(self, other)

    def __getitem__(self, idx):
        return F.slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return F.sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return F.mean(self, axis=axis, keepdims=keepdims)

    def backward(self):
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as an op output, recording on the active tape when needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node = None
    out.requires_grad = False
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = active_tape().record(op, inputs, backward_fn)
    return out


def backward(loss: Tensor, leaves: Optional[Iterable[Tensor]] = None):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Grads accumulate across calls until reset. When ``leaves`` is given, any
    of them left untouched gets an explicit zero gradient and the list is
    returned.
    """
    if loss.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be scalar")
    leaves = list(leaves) if leaves is not None else None
    if loss.node is None:
        if loss.requires_grad:
            g = np.ones_like(loss.data)
            loss.grad = g if loss.grad is None else loss.grad + g
        return _fill_zero(leaves)
    tape = active_tape()
    node = loss.node
    if node.generation != tape.generation or node.index >= len(tape.nodes) or tape.nodes[node.index] is not node:
        raise StaleTapeError("loss refers to a node from a cleared or different tape")

    grads: dict[int, np.ndarray] = {node.index: np.ones_like(loss.data)}
    for i in range(node.index, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        cur = tape.nodes[i]
        in_grads = cur.backward_fn(g)
        for inp, ig in zip(cur.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp.node is not None:
                j = inp.node.index
                if inp.node.generation != tape.generation:
                    raise StaleTapeError(f"input of {cur.op} refers to a stale node")
                if j in grads:
                    grads[j] = grads[j] + ig
                else:
                    grads[j] = ig
            else:
                if inp.grad is None:
                    inp.grad = np.array(ig, dtype=inp.data.dtype, copy=True)
                else:
                    inp.grad = inp.grad + ig
    return _fill_zero(leaves)


def _fill_zero(leaves):
    if leaves is None:
        return None
    for t in leaves:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    return leaves


from . import functional as F  # noqa: E402  (circular: operators dispatch here)
