"""Dense tensors and the tape that records differentiable operations."""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_state = threading.local()


class Tensor:
    """An N-d array (batch, channel, height, width order) with an optional gradient.

    ``requires_grad`` marks a leaf whose gradient should be accumulated into
    ``grad`` when a tape is replayed backwards.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim and min(arr.shape) < 1:
            raise ValueError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def tracked(self) -> bool:
        """True if gradients can flow into this tensor."""
        return self.requires_grad or self._node

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of executed differentiable operations.

    Used as a context manager; ops executed inside record themselves when at
    least one input is tracked. :meth:`backward` replays the record in exact
    reverse order.
    """

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        out._node = True
        self.entries.append((out, inputs, backward))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if loss.data.size != 1:
                raise ValueError("backward without explicit grad needs a scalar loss")
            grad = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): grad}
        for out, inputs, fn in reversed(self.entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn(g)
            for t, gt in zip(inputs, in_grads):
                if gt is None or not t.tracked():
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gt
                else:
                    grads[key] = gt
                if t.requires_grad and not t._node:
                    # leaf: accumulate now, drop from pending map
                    t.grad = grads.pop(key) if t.grad is None else t.grad + grads.pop(key)
        if loss.requires_grad and not loss._node:
            loss.grad = grad if loss.grad is None else loss.grad + grad


def current_tape() -> Tape | None:
    return getattr(_state, "tape", None)


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result, recording it on the active tape if any input is tracked."""
    out = Tensor(data, dtype=data.dtype)
    tape = current_tape()
    if tape is not None and any(t.tracked() for t in inputs):
        tape.record(out, tuple(inputs), backward)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)
