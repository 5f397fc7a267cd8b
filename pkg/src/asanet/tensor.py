"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a row-major numpy array.  Operations on tensors that
require gradients record a :class:`Node` holding the parents and a closure
mapping the output gradient to one gradient per parent.  ``backward`` walks
the recorded graph once in reverse topological order and accumulates into
the ``grad`` buffers of leaf tensors.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, DimensionError, GraphIntegrityError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, parameter updates)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    __slots__ = ("op", "parents", "backward_fn", "freed")

    def __init__(self, op: str, parents: Tuple["Tensor", ...], backward_fn: Callable):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.freed = False

    def free(self) -> None:
        self.backward_fn = None
        self.freed = True


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64
    # np.require keeps 0-d arrays 0-d (ascontiguousarray would promote them)
    return np.require(arr, dtype=dtype, requirements="C")


class Tensor:
    """N-dimensional float32/float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        self.data = _as_array(data, dtype)
        if self.data.dtype not in (np.float32, np.float64):
            raise ContractError(f"unsupported dtype {self.data.dtype}; use float32 or float64")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node: Optional[Node] = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autograd -----------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None, free_graph: bool = False) -> None:
        """Accumulate d(self)/d(leaf) into every requires-grad leaf.

        ``self`` must hold a single element.  Gradients accumulate across calls;
        call ``zero_grad`` on the leaves to reset.  With ``free_graph=True`` the
        saved contexts are released afterwards and a later backward through the
        same graph raises :class:`GraphIntegrityError`.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that does not require grad")
        if grad is None:
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)}
        for t in order:
            g = grads.pop(id(t), None)
            if g is None:
                continue
            node = t.node
            if node is None:
                if t.requires_grad:
                    if t.grad is None:
                        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
                    else:
                        t.grad += g
                continue
            if node.freed:
                raise GraphIntegrityError(
                    f"graph node '{node.op}' was freed; rebuild the graph before calling backward again"
                )
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if free_graph:
            for t in order:
                if t.node is not None:
                    t.node.free()

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    def __radd__(self, other):
        from . import functional as F
        return F.add(other, self)

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    def __rmul__(self, other):
        from . import functional as F
        return F.mul(other, self)

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)

    def sum(self):
        from . import functional as F
        return F.sum(self)

    def mean(self):
        from . import functional as F
        return F.mean(self)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)


def _topological_order(root: Tensor) -> list:
    """Reverse topological order (root first); each tensor appears once."""
    visited = set()
    post = []
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            post.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
    post.reverse()
    return post


def make_result(
    data: np.ndarray,
    parents: Sequence[Tensor],
    op: str,
    backward_fn: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]],
) -> Tensor:
    """Wrap ``data`` and record a graph node if any parent needs gradients."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out.node = Node(op, tuple(parents), backward_fn) if needs else None
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the unit axes along which ``shape`` was broadcast."""
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


def broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    """Unit-axis broadcast between equal-rank shapes; no rank promotion."""
    if a == b:
        return a
    if len(a) != len(b):
        raise DimensionError(f"dimension mismatch: {a} vs {b} (ranks differ)")
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise DimensionError(f"dimension mismatch: {a} vs {b}")
    return tuple(out)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)
