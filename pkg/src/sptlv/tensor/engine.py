"""Tape-based reverse-mode automatic differentiation.

A :class:`Graph` is an append-only list of operation records. Operations
executed while a graph is active (``with Graph() as g:``) and touching at
least one tensor with ``requires_grad=True`` are recorded in insertion
order, which is also a valid topological order. ``g.backward(loss)`` walks
the list in reverse once; the tape is consumed afterwards.

Outside an active graph nothing is recorded, which doubles as a
``no_grad`` mode for evaluation.
"""

from __future__ import annotations

import logging
import weakref
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_ACTIVE: list["Graph"] = []


class GraphError(RuntimeError):
    """Misuse of the gradient tape (non-scalar loss, reused tape, ...)."""


class Tensor:
    """n-dimensional array with an optional slot on a gradient tape.

    Parameters
    ----------
    data : array_like
        Values. Copied only if a dtype conversion is needed.
    requires_grad : bool
        Leaf tensors with this flag accumulate gradients into ``grad``.
    dtype : numpy dtype, optional
        Defaults to the dtype of ``data`` (float64 for Python scalars).
    name : str, optional
        Used in diagnostics (e.g. NaN reports from the optimizer).
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

    # -- basic properties ---------------------------------------------------
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def backward(self) -> None:
        """Backpropagate through the graph this tensor was recorded on.

        The graph must still be referenced (``with Graph() as g:``); tensors
        do not keep their tape alive.
        """
        graph = None if self._node is None else self._node.graph
        if graph is None:
            raise GraphError("tensor was not produced on a live graph")
        graph.backward(self)

    # -- operator sugar (implemented in ops) --------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

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
        return self.transpose()


@dataclass(eq=False)
class Node:
    """One operation record on the tape.

    The output tensor points at its node but not the other way round, and
    the graph is held weakly, so a tape is freed by reference counting alone.
    """

    index: int
    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    graph_ref: "weakref.ref[Graph]" = field(repr=False)

    @property
    def graph(self) -> Optional["Graph"]:
        return self.graph_ref()


class Graph:
    """Append-only operation tape.

    Examples
    --------
    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Graph() as g:
    ...     loss = (x * x).sum()
    >>> g.backward(loss)
    >>> x.grad
    array([2., 4., 6.])
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self) -> "Graph":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward) -> None:
        if self.consumed:
            raise GraphError("cannot record on a graph that was already backpropagated")
        node = Node(len(self.nodes), op, tuple(inputs), backward, weakref.ref(self))
        for t in node.inputs:
            if t._node is not None and t._node.graph is self and t._node.index >= node.index:
                raise GraphError(f"input of {op} does not precede it on the tape")
        output._node = node
        output.requires_grad = True
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every recorded leaf."""
        if self.consumed:
            raise GraphError("backward called twice on the same graph; re-run the forward pass")
        if loss.size != 1:
            raise GraphError(f"loss must be a scalar, got shape {loss.shape}")
        if loss._node is None or loss._node.graph is not self:
            raise GraphError("loss is not reachable from this graph")
        self.consumed = True

        grads: dict[int, np.ndarray] = {loss._node.index: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(node.index, None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._node is not None and t._node.graph is self:
                    k = t._node.index
                    if k in grads:
                        grads[k] = grads[k] + gi
                    else:
                        grads[k] = gi
                elif t._node is None:
                    gi = np.asarray(gi, dtype=t.data.dtype).reshape(t.shape)
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
        # release saved contexts
        for node in self.nodes:
            node.backward, node.inputs = _spent, ()
        self.nodes = []


def _spent(_):
    raise GraphError("graph already consumed")


def active_graph() -> Optional[Graph]:
    return _ACTIVE[-1] if _ACTIVE else None


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``data`` and, when needed, record the producing operation."""
    out = Tensor(data)
    g = active_graph()
    if g is not None and any(t.requires_grad for t in inputs):
        g.record(op, inputs, out, backward)
    return out
