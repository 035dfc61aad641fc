"""Dense tensors and the reverse-mode differentiation tape.

Activations use the axis order (batch, channel, frame, height, width) in
row-major float32 storage; fully connected layers and losses use lower ranks.
Gradients are plain numpy arrays of the same shape as the value they belong
to and accumulate by summation when a tensor fans out into several consumers.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.float32, np.float64)


def _coerce(data, dtype) -> np.ndarray:
    if dtype is not None:
        return np.ascontiguousarray(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(DEFAULT_DTYPE)
    return np.ascontiguousarray(arr)


class Tensor:
    """A dense n-d float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _coerce(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.tape: Optional["Tape"] = None

    @property
    def shape(self):
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

    def detach(self) -> "Tensor":
        """A view of the same storage with no gradient tracking."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match value shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"


class Parameter(Tensor):
    """A trainable tensor with a dotted-path name and a branch role tag.

    role is "mask" for parameters living in an attention mask branch,
    "trunk" for the trunk branch, and "other" everywhere else.
    """

    __slots__ = ("name", "role")

    def __init__(self, data, name: str = "", role: str = "other", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        if role not in ("trunk", "mask", "other"):
            raise ValueError(f"unknown parameter role {role!r}")
        self.name = name
        self.role = role

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.data.shape}, role={self.role})"


class _Node:
    """One recorded operation: output, inputs, and the gradient rule."""

    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: Tensor, inputs: Sequence[Tensor], backward_fn: Callable):
        self.output = output
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


_STACK = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STACK, "tapes", None)
    if stack is None:
        stack = []
        _STACK.tapes = stack
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations for one backward pass.

    Operations append nodes in execution order, which is already a valid
    topological order, so backward simply walks the list in reverse. A tape
    is consumed by its backward pass and cannot be replayed.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape context exited out of order")
        stack.pop()

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> None:
        if self.consumed:
            raise RuntimeError("cannot record onto a consumed tape")
        output.tape = self
        self.nodes.append(_Node(output, inputs, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into t.grad for every recorded tensor."""
        if self.consumed:
            raise RuntimeError("backward called on a consumed tape")
        if loss.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        if loss.tape is not self:
            raise RuntimeError("loss was not produced under this tape")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            grads = node.backward_fn(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                inp.accumulate_grad(gi)
        self.consumed = True
        self.nodes = []


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss to its tape's leaves."""
    if loss.tape is None:
        raise RuntimeError("loss was not produced under an active tape")
    loss.tape.backward(loss)


def zero_grads(params) -> None:
    """Clear the gradient buffers of an iterable of tensors."""
    for p in params:
        p.grad = None
