"""Dense float64 tensors with a tape-based reverse-mode differentiation graph.

Every differentiable operation appends one node to the active :class:`Graph`
in forward execution order, so the tape itself is a topological order and the
backward pass is a single reverse sweep over it.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Node:
    __slots__ = ("op", "out", "parents", "backward")

    def __init__(self, op: str, out: "Tensor", parents: tuple, backward: BackwardFn):
        self.op = op
        self.out = out
        self.parents = parents
        self.backward = backward

    def __repr__(self) -> str:
        return f"Node({self.op}, shape={self.out.shape})"


class Graph:
    """Append-only record of operations for one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.enabled = True

    def record(self, op: str, out: "Tensor", parents: tuple, backward: BackwardFn) -> None:
        self.nodes.append(Node(op, out, parents, backward))

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def current_graph() -> Graph:
    g = getattr(_local, "graph", None)
    if g is None:
        g = _local.graph = Graph()
    return g


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference)."""
    g = current_graph()
    prev = g.enabled
    g.enabled = False
    try:
        yield
    finally:
        g.enabled = prev


def grad_enabled() -> bool:
    return current_graph().enabled


class Tensor:
    """A float64 array, optionally tracked for differentiation.

    Leaf tensors created with ``requires_grad=True`` are parameters; they hold a
    single accumulating ``grad`` array that :func:`backward` adds into.
    """

    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

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

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar; implementations live in ops.py
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

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __pow__(self, exponent: float):
        from . import ops
        return ops.power(self, exponent)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
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

    __hash__ = object.__hash__


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def make_result(op: str, data: np.ndarray, parents: tuple, backward: BackwardFn) -> Tensor:
    """Wrap an op's output, recording a node when any parent needs gradients."""
    out = Tensor(data)
    g = current_graph()
    if g.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.is_leaf = False
        g.record(op, out, parents, backward)
    return out


def backward(loss: Tensor, graph: Graph | None = None) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(.) to every leaf parameter reachable from ``loss``.

    Gradients accumulate into ``leaf.grad``. The graph is cleared afterwards.
    Returns a map from each leaf that received a gradient to that gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    graph = graph or current_graph()
    touched: dict[int, Tensor] = {}
    if not loss.requires_grad:
        graph.clear()
        return {}
    if loss.is_leaf:
        _accumulate_leaf(loss, np.ones_like(loss.data), touched)
        graph.clear()
        return {t: t.grad for t in touched.values()}

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.backward(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.data.shape:
                raise AssertionError(f"{node.op}: grad shape {pg.shape} != {p.data.shape}")
            if p.is_leaf:
                _accumulate_leaf(p, pg, touched)
            else:
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
    graph.clear()
    return {t: t.grad for t in touched.values()}


def _accumulate_leaf(p: Tensor, g: np.ndarray, touched: dict) -> None:
    if p.grad is None:
        p.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        p.grad += g
    touched[id(p)] = p
