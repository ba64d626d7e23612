"""Momentum SGD."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    """Raised when a gradient contains NaN or Inf."""


def sgd_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    velocity: dict[str, np.ndarray] | None = None,
) -> None:
    """Update ``params`` in place.

    v <- momentum * v + (g + weight_decay * w);  w <- w - lr * v.
    With momentum 0 and no decay this is plain ``w - lr * g``.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
    for name, g in grads.items():
        p = params[name]
        dtype = p.data.dtype
        step = g + dtype.type(weight_decay) * p.data if weight_decay else g
        if momentum:
            if velocity is None:
                raise ValueError("momentum > 0 requires a velocity buffer")
            v = velocity.get(name)
            v = step.copy() if v is None else dtype.type(momentum) * v + step
            velocity[name] = v
            step = v
        p.data = (p.data - dtype.type(lr) * step).astype(dtype)


class SGD:
    def __init__(self, params: Mapping[str, Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, lr: float) -> None:
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        sgd_step(self.params, grads, lr, self.momentum, self.weight_decay, self.velocity)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
