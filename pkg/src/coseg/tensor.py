"""Dense tensors with tape-free reverse-mode differentiation.

Every differentiable primitive is a :class:`Function` subclass with a pure
``forward`` on numpy arrays and a ``backward`` that maps the output gradient
to one gradient per input.  Applying a function to tensors that require
gradients attaches a :class:`Node` to the result; :class:`Graph` recovers the
topological order of those nodes from a loss tensor and drives the backward
sweep.
"""

from __future__ import annotations

import contextlib
import weakref
from typing import Any, Iterable, Sequence

import numpy as np

_grad_enabled = True
_debug = False


def set_debug(flag: bool) -> None:
    """Check every forward output for NaN/Inf when all inputs are finite."""
    global _debug
    _debug = bool(flag)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data: Any, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """A numpy array plus the bookkeeping reverse-mode AD needs."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data: Any, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the buffer."""
        return self.data.reshape(-1)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Arithmetic sugar used by losses and tests.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        return ops.broadcast_mul(self, other)

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        from . import ops

        return ops.sum_all(self)


class Context:
    """Scratch space a Function's forward uses to hand state to its backward."""

    def save(self, **kwargs) -> None:
        self.__dict__.update(kwargs)


class Node:
    """One executed operation: function, inputs, parameters and saved state."""

    __slots__ = ("fn", "inputs", "params", "ctx", "_output")

    def __init__(self, fn, inputs, params, ctx, output):
        self.fn = fn
        self.inputs: tuple[Tensor, ...] = inputs
        self.params: dict = params
        self.ctx: Context = ctx
        self._output = weakref.ref(output)

    @property
    def output(self) -> Tensor | None:
        return self._output()

    def __repr__(self) -> str:
        return f"Node({self.fn.__name__}, inputs={[t.shape for t in self.inputs]})"


class Function:
    """Base class for differentiable primitives.

    Subclasses implement ``forward(ctx, *arrays, **params)`` returning an
    array and ``backward(ctx, grad)`` returning a tuple with one entry per
    array input (``None`` where no gradient flows).
    """

    @staticmethod
    def forward(ctx: Context, *arrays: np.ndarray, **params) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **params) -> Tensor:
        ctx = Context()
        arrays = [t.data for t in inputs]
        out = Tensor(cls.forward(ctx, *arrays, **params))
        if _debug and all(np.isfinite(a).all() for a in arrays):
            if not np.isfinite(out.data).all():
                raise FloatingPointError(f"{cls.__name__} produced non-finite values")
        if _grad_enabled and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._node = Node(cls, tuple(inputs), params, ctx, out)
        return out


class Graph:
    """Topologically ordered record of the operations that produced a tensor.

    Entry ``k`` only consumes leaves or outputs of entries ``< k``.
    """

    def __init__(self, entries: Sequence[Node], output: Tensor):
        self.entries = list(entries)
        self.output = output
        self._ids = {id(n.output) for n in self.entries}

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order: list[Node] = []
        seen: set[int] = set()
        stack: list[tuple[Node, bool]] = []
        if output._node is not None:
            stack.append((output._node, False))
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
        return cls(order, output)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._ids

    def leaves(self) -> list[Tensor]:
        out, seen = [], set()
        for node in self.entries:
            for t in node.inputs:
                if t._node is None and t.requires_grad and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out

    def replay(self) -> bool:
        """Re-run every recorded forward and report whether all outputs match bit-exactly."""
        for node in self.entries:
            again = node.fn.forward(Context(), *[t.data for t in node.inputs], **node.params)
            out = node.output
            if out is None or not np.array_equal(again, out.data):
                return False
        return True

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss not in self:
            raise ValueError("loss tensor was not produced by this graph")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.entries):
            out = node.output
            g = grads.pop(id(out), None) if out is not None else None
            if g is None:
                continue
            in_grads = node.fn.backward(node.ctx, g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise RuntimeError(
                        f"{node.fn.__name__} returned gradient of shape {gi.shape} "
                        f"for input of shape {t.shape}"
                    )
                if t._node is None:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                else:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi


def backward(loss: Tensor, graph: Graph | None = None) -> Graph:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        if loss._node is None:
            raise ValueError("loss is not connected to any tensor requiring grad")
        graph = Graph.trace(loss)
    graph.backward(loss)
    return graph


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
