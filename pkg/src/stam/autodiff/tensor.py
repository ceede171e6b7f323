"""Dense float64 tensors and a tape-based reverse-mode differentiator."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from stam.errors import ContractError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_recording = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    global _recording
    previous, _recording = _recording, False
    try:
        yield
    finally:
        _recording = previous


class Tensor:
    """N-dimensional float64 array with an optional gradient slot.

    Tensors produced by an operation on at least one ``requires_grad`` input
    remember their parents and a backward rule; leaves do not.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn,
                 op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data if data.dtype == np.float64 else data.astype(np.float64)
        out.grad = None
        out.requires_grad = _recording and any(p.requires_grad for p in parents)
        out.op = op
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

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
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple[int, ...]
    output: int
    rule: BackwardFn


class Tape:
    """Operations recorded between the leaves and a loss, in topological order."""

    def __init__(self, nodes: list[Node], tensors: dict[int, Tensor]):
        self.nodes = nodes
        self._tensors = tensors

    @classmethod
    def record(cls, loss: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        # iterative post-order DFS; deep graphs would overflow the recursion limit
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        tensors = {id(t): t for t in order}
        nodes = [Node(t.op, tuple(id(p) for p in t._parents), id(t), t._backward)
                 for t in order if t._backward is not None]
        return cls(nodes, tensors)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._tensors:
            raise ContractError("loss was not recorded on this tape")
        # intermediate grads describe one pass only; leaf grads accumulate
        for node in self.nodes:
            self._tensors[node.output].grad = None
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            out = self._tensors[node.output]
            if out.grad is None:
                continue
            grads = node.rule(out.grad)
            for pid, g in zip(node.inputs, grads):
                if g is None:
                    continue
                parent = self._tensors.get(pid)
                if parent is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    # leaves own a private writable copy; intermediates may alias
                    leaf = parent._backward is None
                    parent.grad = np.array(g, dtype=np.float64, copy=True) if leaf else g
                else:
                    parent.grad = parent.grad + g


def backward(loss: Tensor, tape: Optional[Tape] = None) -> Tape:
    """Populate ``.grad`` on every ``requires_grad`` tensor reachable from ``loss``.

    Gradients accumulate additively, both across fan-out inside one graph and
    across repeated calls; clear them with :meth:`Tensor.zero_grad` between steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    tape = tape if tape is not None else Tape.record(loss)
    tape.backward(loss)
    return tape


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
