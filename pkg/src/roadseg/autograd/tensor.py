"""Reverse-mode differentiable tensors on a per-pass gradient tape.

Tensors are float64, logically immutable once created. Every operation
records itself on the active tape (if one is open and a parent requires
gradients); ``backward`` replays the tape in reverse and materializes
``.grad`` on every requires-grad tensor it reaches.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


_id_counter = itertools.count()
_tape_stack: list["Tape"] = []


def active_tape() -> Optional["Tape"]:
    return _tape_stack[-1] if _tape_stack else None


class Tape:
    """Ordered record of operations for one forward pass.

    Entries are appended in creation order, which is topological by
    construction (define-by-run), so a single reverse sweep visits each
    node exactly once. A tape is consumed by its first ``backward``.
    """

    def __init__(self) -> None:
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.pop()

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, out: "Tensor", parents: Sequence["Tensor"], backward_fn: Callable) -> None:
        if self._consumed:
            raise RuntimeError("tape already consumed by a backward pass")
        self._entries.append((out, tuple(parents), backward_fn))


class Tensor:
    """n-dimensional float64 array participating in gradient taping.

    ``backward_fn`` stored on the tape maps the output gradient to a
    tuple of parent gradients (one per parent, None for no flow).
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "tape")

    # Refuse numpy ufunc dispatch so ndarray <op> Tensor falls back to the
    # reflected Tensor operators instead of silently coercing.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_id_counter)
        self.tape = active_tape()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar is attached by roadseg.autograd.ops at import time.


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result, recording it on the active tape when needed."""
    requires = any(p.requires_grad for p in parents)
    tape = active_tape()
    out = Tensor(out_data, requires_grad=requires)
    if requires and tape is not None:
        tape.record(out, parents, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Materialize gradients of a scalar loss on its tape's tensors.

    The tape is consumed: a second backward on the same tape raises.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise ValueError("loss is not recorded on any tape")
    if tape._consumed:
        raise RuntimeError("tape already consumed by a backward pass")
    tape._consumed = True

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for out, parents, backward_fn in reversed(tape._entries):
        g = grads.pop(out.node_id, None)
        if g is None:
            continue
        if out.requires_grad:
            out.grad = g
        parent_grads = backward_fn(g)
        for parent, pg in zip(parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg
    # Leaves (never an op output) still hold their accumulated gradient.
    for out, parents, _ in tape._entries:
        for parent in parents:
            if parent.requires_grad and parent.node_id in grads:
                parent.grad = grads[parent.node_id]
    if loss.requires_grad and loss.grad is None:
        loss.grad = np.ones_like(loss.data)
