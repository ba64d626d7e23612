"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    wrt: Sequence[int] | None = None,
) -> float:
    """Worst relative error between tape gradients and central differences.

    ``fn`` maps Tensors to a scalar Tensor. Inputs are promoted to float64.
    Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    wrt = range(len(arrays)) if wrt is None else wrt

    tensors = [Tensor(a, requires_grad=(i in wrt), dtype=np.float64) for i, a in enumerate(arrays)]
    with Tape() as tape:
        out = fn(*tensors)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise FloatingPointError("non-finite value at the check point")
    tape.backward(out)

    def evaluate() -> float:
        val = fn(*[Tensor(a, dtype=np.float64) for a in arrays]).data
        if not np.isfinite(val).all():
            raise FloatingPointError("non-finite value during finite differencing")
        return float(val)

    worst = 0.0
    for i in wrt:
        analytic = tensors[i].grad
        if analytic is None:
            analytic = np.zeros_like(arrays[i])
        a = arrays[i].reshape(-1)
        an = analytic.reshape(-1)
        for k in range(a.size):
            orig = a[k]
            a[k] = orig + eps
            fp = evaluate()
            a[k] = orig - eps
            fm = evaluate()
            a[k] = orig
            num = (fp - fm) / (2 * eps)
            err = abs(an[k] - num) / max(abs(an[k]), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
