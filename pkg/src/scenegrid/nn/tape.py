"""Reverse-mode autodiff tape over numpy arrays.

Forward ops push a backward closure onto the tape; ``backward`` seeds the
scalar root with gradient 1 and replays the closures in exact reverse
execution order, accumulating additively.  Nodes are throwaway per forward
pass; Parameters persist and collect gradients across a whole batch.
"""

from __future__ import annotations

import numpy as np


class Node:
    """Intermediate value in a taped computation."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad = None

    @property
    def shape(self):
        return self.value.shape


class Parameter:
    """Named trainable array with a persistent gradient accumulator."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def assign(self, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=self.value.dtype)
        if value.shape != self.value.shape:
            raise ValueError(
                f"parameter {self.name!r}: cannot assign shape {value.shape} "
                f"to declared shape {self.value.shape}")
        self.value = value

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def accumulate(target, grad: np.ndarray) -> None:
    """Add a gradient contribution to a Node or Parameter."""
    if isinstance(target, Parameter):
        target.grad += grad
    elif target.grad is None:
        target.grad = np.array(grad, copy=True)
    else:
        target.grad = target.grad + grad


class TapeError(RuntimeError):
    pass


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self._ops: list = []
        self._consumed = False

    def record(self, backward_fn) -> None:
        self._ops.append(backward_fn)

    def __len__(self):
        return len(self._ops)


def backward(tape: Tape, root: Node) -> None:
    """Accumulate d(root)/d(input) into every recorded input's .grad."""
    if tape._consumed:
        raise TapeError("tape already consumed; build a fresh tape per forward pass")
    if np.asarray(root.value).size != 1:
        raise TapeError(f"backward root must be scalar, got shape {np.shape(root.value)}")
    tape._consumed = True
    root.grad = np.ones_like(root.value)
    for fn in reversed(tape._ops):
        fn()
