"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous row-major numpy buffer. Operations on
tensors that require gradients record a :class:`Node` holding the inputs
and a backward rule; node ids come from one monotone counter so recording
order is a valid topological order. :func:`backward` replays the nodes
reachable from a scalar root in reverse recording order.

There is no implicit broadcasting: binary elementwise ops demand equal
shapes. Both operands of every op must share one precision mode.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import PrecisionError, ShapeError

SINGLE = np.dtype(np.float32)
DOUBLE = np.dtype(np.float64)
PRECISIONS = {"single": SINGLE, "double": DOUBLE}

_ids = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable recording inside the block."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def as_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return PRECISIONS[precision]
        except KeyError:
            raise ShapeError(f"unknown precision mode {precision!r}; expected single or double") from None
    dt = np.dtype(precision)
    if dt not in (SINGLE, DOUBLE):
        raise ShapeError(f"unsupported dtype {dt}; expected float32 or float64")
    return dt


@dataclass(eq=False)
class Node:
    id: int
    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=as_dtype(dtype))
        elif isinstance(data, np.ndarray) and data.dtype in (SINGLE, DOUBLE):
            arr = data
        else:
            arr = np.asarray(data, dtype=SINGLE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def precision(self) -> str:
        return "double" if self.data.dtype == DOUBLE else "single"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, precision={self.precision}{rg})"


def zeros(shape, precision="single", requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=as_dtype(precision)), requires_grad=requires_grad)


def ones(shape, precision="single", requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=as_dtype(precision)), requires_grad=requires_grad)


def _check_precision(*ts: Tensor) -> None:
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise PrecisionError(f"mixed precision on one tape: {dt} vs {t.dtype}")


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``out`` in a tensor; attach a tape node when any input needs gradients."""
    _check_precision(*inputs)
    t = Tensor.__new__(Tensor)
    t.data = out if out.flags.c_contiguous else np.ascontiguousarray(out)
    t.grad = None
    t.name = None
    t.node = None
    t.requires_grad = False
    if grad_enabled() and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        t.node = Node(next(_ids), op, tuple(inputs), backward_fn)
    return t


@dataclass
class Tape:
    """Nodes reachable from a root, in recording order."""

    nodes: list = field(default_factory=list)
    outputs: list = field(default_factory=list)

    @classmethod
    def collect(cls, root: Tensor) -> "Tape":
        seen = set()
        found = []
        stack = [root]
        while stack:
            t = stack.pop()
            if t.node is None or id(t) in seen:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(t.node.inputs)
        found.sort(key=lambda t: t.node.id)
        return cls(nodes=[t.node for t in found], outputs=found)

    def is_topological(self) -> bool:
        pos = {id(n): i for i, n in enumerate(self.nodes)}
        for n in self.nodes:
            for inp in n.inputs:
                if inp.node is not None and pos.get(id(inp.node), -1) >= pos[id(n)]:
                    return False
        return True


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True).reshape(t.shape)
    else:
        t.grad += g.reshape(t.shape)


def backward(root: Tensor) -> Tape:
    """Accumulate d(root)/d(t) into ``t.grad`` for every reachable ``t`` with ``requires_grad``."""
    if root.size != 1:
        raise ShapeError(f"backward root must hold a single element, got shape {root.shape}")
    if not root.requires_grad:
        raise ShapeError("backward root does not require grad (is it on an active tape?)")
    tape = Tape.collect(root)
    pending = {id(root): np.ones(root.shape, dtype=root.dtype)}
    for t in reversed(tape.outputs):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        _accumulate(t, g)
        grads = t.node.backward(g)
        for inp, ig in zip(t.node.inputs, grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp.node is None:
                _accumulate(inp, ig)
            elif id(inp) in pending:
                pending[id(inp)] = pending[id(inp)] + ig
            else:
                pending[id(inp)] = ig
    if root.node is None:
        _accumulate(root, pending.pop(id(root)))
    return tape


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record("scale", a.data * a.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors the op name
    shape = a.shape
    out = np.array([a.data.sum()], dtype=a.dtype)
    return record("sum", out, (a,), lambda g: (np.full(shape, g[0], dtype=g.dtype),))


def _norm_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not isinstance(ax, (int, np.integer)) or not -ndim <= ax < ndim:
            raise ShapeError(f"invalid axis {ax!r} for a {ndim}-d tensor")
        out.append(int(ax) % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {tuple(axes)}")
    return tuple(sorted(out))


def mean_over(a: Tensor, axes=None) -> Tensor:
    """Mean over ``axes`` (all when None); reduced axes are dropped, a full reduction gives shape (1,)."""
    axes = _norm_axes(axes, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes)
    out = np.asarray(out, dtype=a.dtype)
    if out.ndim == 0:
        out = out.reshape(1)
    shape = a.shape
    keep = tuple(1 if i in axes else d for i, d in enumerate(shape))

    def bw(g):
        return (np.broadcast_to(g.reshape(keep) / count, shape).copy(),)

    return record("mean_over", out, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    src = a.shape
    return record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))
