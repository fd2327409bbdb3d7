"""Dense tensor with tape-style reverse-mode differentiation.

Every differentiable operation that touches a tensor requiring gradients
records a :class:`Node` on its output. ``backward`` orders the reachable
nodes topologically, visits each exactly once in reverse, and then releases
the graph so a second call on the same loss fails loudly.
"""

from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}


class _State:
    dtype = np.float32
    grad_enabled = True
    debug = os.environ.get("PAVSOD_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GraphError(RuntimeError):
    """Backward was requested on a graph that cannot be differentiated."""


def default_dtype():
    return _State.dtype


def set_precision(mode: str) -> None:
    if mode not in _DTYPES:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {mode!r}")
    _State.dtype = _DTYPES[mode]


def get_precision() -> str:
    return "f64" if _State.dtype == np.float64 else "f32"


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors (``"f32"``/``"f64"``)."""
    prev = _State.dtype
    set_precision(mode)
    try:
        yield
    finally:
        _State.dtype = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _State.grad_enabled
    _State.grad_enabled = False
    try:
        yield
    finally:
        _State.grad_enabled = prev


def set_debug(flag: bool) -> None:
    _State.debug = bool(flag)


@contextlib.contextmanager
def debug_checks(flag: bool = True) -> Iterator[None]:
    prev = _State.debug
    _State.debug = flag
    try:
        yield
    finally:
        _State.debug = prev


@dataclass(eq=False)
class Node:
    """One executed op: its inputs, its output, and the vector-Jacobian product."""

    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    output: "Tensor | None" = field(default=None, repr=False)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "_released", "name", "__weakref__")

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _State.dtype)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self._released = False
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    # -- operator sugar; implementations live in ops -------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, exponent: float):
        from . import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis, keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self, None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64):
        return Tensor(x, dtype=_State.dtype)
    return Tensor(x, dtype=dtype)


def record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap a forward result and, when any input needs grads, attach its node."""
    if _State.debug and not np.all(np.isfinite(out_data)):
        finite_in = all(np.all(np.isfinite(t.data)) for t in inputs)
        if finite_in:
            raise FloatingPointError(f"non-finite output from {op} on finite inputs")
    out = Tensor.__new__(Tensor)
    out_data = np.asarray(out_data)
    out.data = out_data if out_data.flags.c_contiguous else np.ascontiguousarray(out_data)
    out.grad = None
    out._node = None
    out._released = False
    out.name = None
    needs = _State.grad_enabled and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        node = Node(op, tuple(inputs), backward_fn)
        node.output = out
        out._node = node
    return out


def graph_nodes(loss: Tensor) -> list[Node]:
    """Nodes reachable from ``loss`` in topological order (inputs first)."""
    order: list[Node] = []
    seen: set[int] = set()
    if loss._node is None:
        return order
    stack: list[tuple[Node, bool]] = [(loss._node, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for t in node.inputs:
            if t._node is not None and id(t._node) not in seen:
                stack.append((t._node, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise GraphError("graph already consumed by a previous backward; rerun the forward pass")
    if not loss.requires_grad:
        raise GraphError("loss is detached from every tensor requiring grad")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        loss._released = True
        return
    nodes = graph_nodes(loss)
    grads: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(nodes):
        out = node.output
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.data.shape:
                raise ShapeError(f"{node.op}: gradient shape {gi.shape} != input shape {t.data.shape}")
            if t._node is None:
                gi = gi.astype(t.data.dtype, copy=False)
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
    for node in nodes:
        node.output._released = True
        node.output._node = None
