"""Dense float64 tensors with define-by-run reverse-mode differentiation."""

from __future__ import annotations

import contextlib
from typing import Any, Optional, Sequence

import numpy as np

from ..errors import DimensionError, GraphError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (decoding, evaluation)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Context:
    """One recorded operation.

    ``parents`` holds, per input, the producing Context (intermediate), the
    leaf Tensor itself (requires_grad leaf), or None (constant). Inputs are
    not referenced directly, so intermediate buffers that no backward rule
    saved are freed as soon as the caller drops them.
    """

    __slots__ = ("fn", "parents", "needs", "saved", "consumed", "__dict__")

    def __init__(self):
        self.fn = None
        self.parents: tuple = ()
        self.needs: tuple = ()
        self.saved: tuple = ()
        self.consumed = False

    def save(self, *arrays):
        self.saved = arrays


class Function:
    """Base class for differentiable operations.

    Subclasses implement ``forward(ctx, *arrays, **kwargs) -> ndarray`` and
    ``backward(ctx, grad) -> tuple`` with one entry (array or None) per input.
    """

    @staticmethod
    def forward(ctx: Context, *args: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> "Tensor":
        tensors = tuple(x if isinstance(x, Tensor) else Tensor(x) for x in inputs)
        ctx = Context()
        out = cls.forward(ctx, *(t.data for t in tensors), **kwargs)
        needs = tuple(t.requires_grad for t in tensors)
        result = Tensor._wrap(out)
        if _GRAD_ENABLED and any(needs):
            parents = []
            for t in tensors:
                if t._ctx is not None:
                    if t._ctx.consumed:
                        raise GraphError("input belongs to a graph that was already consumed by backward()")
                    parents.append(t._ctx)
                else:
                    parents.append(t if t.requires_grad else None)
            ctx.fn = cls
            ctx.parents = tuple(parents)
            ctx.needs = needs
            result.requires_grad = True
            result._ctx = ctx
        return result


class Tensor:
    """A dense row-major float64 array that can take part in a gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "_ctx", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._ctx = None
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = array if array.dtype == np.float64 else array.astype(np.float64)
        t.requires_grad = False
        t.grad = None
        t._ctx = None
        t.name = None
        return t

    # -- introspection ---------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- differentiation -------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every requires_grad leaf.

        The graph is released as it is traversed; calling backward() a second
        time on the same result raises ``GraphError``.
        """
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._ctx is None:
            if not self.requires_grad:
                raise GraphError("loss does not depend on any tensor that requires grad")
            self.grad = np.ones_like(self.data) if self.grad is None else self.grad + 1.0
            return
        if self._ctx.consumed:
            raise GraphError("backward() called twice on the same graph; rerun the forward pass")

        order = _topological_order(self._ctx)
        grads = {id(self._ctx): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if isinstance(node, Tensor):
                if g is not None:
                    g = np.array(g, dtype=np.float64, copy=True).reshape(node.shape)
                    node.grad = g if node.grad is None else node.grad + g
                continue
            node.consumed = True
            parents = node.parents
            node.parents = ()
            if g is None:
                node.saved = ()
                continue
            input_grads = node.fn.backward(node, g)
            node.saved = ()
            for parent, ig, need in zip(parents, input_grads, node.needs):
                if not need or ig is None or parent is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig

    # -- operator sugar (implementations live in ops) ----------------------
    def __add__(self, other):
        return ops.add(self, other)

    def __radd__(self, other):
        return ops.add(other, self)

    def __sub__(self, other):
        return ops.sub(self, other)

    def __rsub__(self, other):
        return ops.sub(other, self)

    def __mul__(self, other):
        return ops.mul(self, other)

    def __rmul__(self, other):
        return ops.mul(other, self)

    def __truediv__(self, other):
        return ops.div(self, other)

    def __rtruediv__(self, other):
        return ops.div(other, self)

    def __neg__(self):
        return ops.neg(self)

    def __matmul__(self, other):
        return ops.matmul(self, other)

    def __getitem__(self, index):
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        return ops.transpose(self, axes or None)


def _topological_order(root: Context) -> list:
    """Contexts and leaf tensors reachable from ``root``, inputs before users."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if isinstance(node, Context):
            if node.consumed:
                raise GraphError("graph already consumed by a previous backward()")
            for parent in node.parents:
                if parent is not None and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def check_shapes_broadcast(a: Sequence[int], b: Sequence[int], op: str) -> tuple:
    """Shapes must be equal or one must be a trailing suffix of the other."""
    a, b = tuple(a), tuple(b)
    if a == b:
        return a
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise DimensionError(f"{op}: shapes {a} and {b} are not broadcastable along leading extents")


from . import ops  # noqa: E402  (circular: ops needs Tensor/Function)
