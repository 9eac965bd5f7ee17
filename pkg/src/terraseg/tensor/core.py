"""Tensor type and the reverse-mode tape.

Every differentiable operation records a :class:`Node` holding the inputs,
whatever activations its backward rule needs, and a closure mapping the
output gradient to input gradients.  Nodes carry a global sequence number,
so sorting the nodes reachable from a loss by that number recovers the
forward order exactly; :func:`backward` walks it in reverse.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """Raised when layer or operation hyperparameters are invalid."""


class NumericDomainError(ValueError):
    """Raised when an operation is applied outside its domain (e.g. log of 0)."""


_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_node_counter = itertools.count()


def default_dtype() -> type:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors and parameters.

    Training runs in float32; gradient checks switch to float64.
    """
    global _DEFAULT_DTYPE
    previous = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording (inference and validation passes)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@dataclass(eq=False)
class Node:
    """One record on the tape."""

    kind: str
    inputs: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    seq: int = field(default_factory=lambda: next(_node_counter))


class Tensor:
    """Dense row-major array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = _DEFAULT_DTYPE
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
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

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self) -> None:
        backward(self)

    # Operator sugar; the implementations live in ops.py.
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

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

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

    def sum(self):
        from . import ops
        return ops.sum(self)

    def mean(self):
        from . import ops
        return ops.mean(self)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def record(kind: str, out_data: np.ndarray, inputs: Sequence[Tensor],
           backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``out_data`` in a Tensor and put a node on the tape if needed."""
    out = Tensor(out_data, dtype=out_data.dtype)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(kind, tuple(inputs), backward_fn)
    return out


class Tape:
    """The forward-ordered list of nodes that produced a given output."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Node] = []
        stack = [output]
        while stack:
            t = stack.pop()
            node = t.node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node.inputs)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def kinds(self) -> list[str]:
        return [n.kind for n in self.nodes]


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from scalar ``loss``.

    Gradients accumulate into existing ``.grad`` buffers, so callers zero
    them between steps.
    """
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward() called on a tensor that does not require grad")

    tape = Tape.from_output(loss)
    # Output gradients of intermediate nodes, keyed by tensor id.
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    out_of_node: dict[int, int] = {}
    stack = [loss]
    visited: set[int] = set()
    while stack:
        t = stack.pop()
        if t.node is None or id(t) in visited:
            continue
        visited.add(id(t))
        out_of_node[id(t.node)] = id(t)
        stack.extend(t.node.inputs)

    for node in reversed(tape.nodes):
        key = out_of_node[id(node)]
        g_out = pending.pop(key, None)
        if g_out is None:
            continue
        grads = node.backward_fn(g_out)
        for inp, g in zip(node.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            if g.shape != inp.shape:
                raise DimensionError(
                    f"internal: {node.kind} produced grad of shape {g.shape} for input {inp.shape}")
            if inp.node is None:
                if inp.grad is None:
                    inp.grad = g.astype(inp.data.dtype, copy=True)
                else:
                    inp.grad += g
            else:
                k = id(inp)
                if k in pending:
                    pending[k] = pending[k] + g
                else:
                    pending[k] = g
        # Saved activations are no longer needed once the node has fired.
        node.backward_fn = _spent
    if loss.node is None:
        loss.grad = np.ones_like(loss.data)


def _spent(_g):
    raise RuntimeError("backward() through the same graph twice is not supported")
