"""Differentiable operations on :class:`Tensor`.

Every op is a pure function of its inputs. Backward closures return one
gradient per input (``None`` where the input is not differentiable).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, as_tensor, make_result


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------

def add(*tensors: Tensor) -> Tensor:
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ValueError(f"add: shape mismatch {t.shape} vs {shape}")
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out = out + t.data

    def backward(g):
        return [g] * len(tensors)

    return make_result(out, tensors, backward)


def scale(x: Tensor, factor: float) -> Tensor:
    out = x.data * x.data.dtype.type(factor)

    def backward(g):
        return [g * g.dtype.type(factor)]

    return make_result(out, [x], backward)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias to an N,C,... tensor."""
    shape = (1, -1) + (1,) * (x.ndim - 2)
    out = x.data + bias.data.reshape(shape)

    def backward(g):
        axes = (0,) + tuple(range(2, g.ndim))
        return [g, g.sum(axis=axes)]

    return make_result(out, [x, bias], backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    in_shape = x.shape
    out = x.data.reshape(shape)

    def backward(g):
        return [g.reshape(in_shape)]

    return make_result(out, [x], backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def backward(g):
        return [np.ascontiguousarray(g.transpose(inverse))]

    return make_result(out, [x], backward)


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Select rows ``x[index]`` along the first axis (duplicates allowed)."""
    index = np.asarray(index, dtype=np.int64)
    out = x.data[index]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return [gx]

    return make_result(out, [x], backward)


def split_batch(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Split along axis 0 into consecutive chunks."""
    outs = []
    start = 0
    for n in sizes:
        outs.append(_slice0(x, start, start + n))
        start += n
    if start != x.shape[0]:
        raise ValueError(f"split sizes {list(sizes)} do not cover axis of {x.shape[0]}")
    return outs


def _slice0(x: Tensor, lo: int, hi: int) -> Tensor:
    out = x.data[lo:hi].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[lo:hi] = g
        return [gx]

    return make_result(out, [x], backward)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        return [np.broadcast_to(g, x.shape).astype(x.dtype)]

    return make_result(out, [x], backward)


def mul_const(x: Tensor, other: np.ndarray) -> Tensor:
    """Elementwise product with a constant (non-differentiable) array."""
    other = np.asarray(other, dtype=x.dtype)
    out = x.data * other

    def backward(g):
        return [g * other]

    return make_result(out, [x], backward)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and (Cout, Cin, kh, kw) weights."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d: input has {cin} channels but weight expects {wcin}")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    xp = np.ascontiguousarray(xp)
    if kh == 1 and kw == 1 and stride == 1:
        cols = xp.reshape(n, cin, 1, 1, oh, ow)
    else:
        cols = _windows(xp, kh, kw, stride, oh, ow)
    # (N, oh, ow, Cout)
    out = np.tensordot(cols, weight.data, axes=([1, 2, 3], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    inputs = [x, weight] + ([bias] if bias is not None else [])

    def backward(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5])) if weight.tracked() else None
        gx = None
        if x.tracked():
            # (Cin, kh, kw, N, oh, ow)
            gcols = np.tensordot(weight.data, g, axes=([0], [1]))
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_result(out, inputs, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, x.data.dtype.type(0))

    def backward(g):
        return [g * mask]

    return make_result(out, [x], backward)


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route gradient to the first element in scan order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return [gx]

    return make_result(np.ascontiguousarray(out), [x], backward)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` with ``x`` (N, K) and ``weight`` (K, L)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"fully_connected: cannot multiply {x.shape} by {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"fully_connected: bias shape {bias.shape} != ({weight.shape[1]},)")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    inputs = [x, weight] + ([bias] if bias is not None else [])

    def backward(g):
        grads = [
            g @ weight.data.T if x.tracked() else None,
            x.data.T @ g if weight.tracked() else None,
        ]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return make_result(out, inputs, backward)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Stack N,Ci,H,W tensors along the channel axis in input order."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat_channels needs at least one input")
    n, _, h, w = tensors[0].shape
    for t in tensors:
        if t.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ValueError(f"concat_channels: {t.shape} does not match N,H,W = {(n, h, w)}")
    if len(tensors) == 1:
        out = tensors[0].data.copy()
    else:
        out = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def backward(g):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors))]

    return make_result(out, tensors, backward)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels, ignore_label: int = -1) -> Tensor:
    """Mean negative log-softmax over rows whose label is not ``ignore_label``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[1]
    valid = labels != ignore_label
    if np.any((labels[valid] < 0) | (labels[valid] >= k)):
        raise ValueError("softmax_cross_entropy: label out of range")
    dtype = logits.dtype
    count = int(valid.sum())
    if count == 0:
        return make_result(np.zeros((), dtype=dtype), [logits], lambda g: [np.zeros_like(logits.data)])

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.nonzero(valid)[0]
    nll = lse[rows] - z[rows, labels[rows]]
    out = np.asarray(nll.sum() / count, dtype=dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels[rows]] -= 1
        p[~valid] = 0
        return [(p * (g / count)).astype(dtype)]

    return make_result(out, [logits], backward)


def smooth_l1(pred: Tensor, target, inside_mask) -> Tensor:
    """Masked smooth-L1 (transition at 1), normalised by the number of masked samples.

    A sample is a row along the first axis that has any non-zero mask entry.
    """
    target = np.asarray(target, dtype=pred.dtype)
    mask = np.asarray(inside_mask, dtype=pred.dtype)
    if target.shape != pred.shape or mask.shape != pred.shape:
        raise ValueError(f"smooth_l1: shapes differ {pred.shape}, {target.shape}, {mask.shape}")
    flat = mask.reshape(mask.shape[0], -1) if mask.ndim else mask.reshape(1, 1)
    count = int(np.count_nonzero(flat.any(axis=1)))
    if count == 0:
        return make_result(np.zeros((), dtype=pred.dtype), [pred], lambda g: [np.zeros_like(pred.data)])
    diff = (pred.data - target) * mask
    ad = np.abs(diff)
    small = ad < 1
    loss = np.where(small, 0.5 * diff * diff, ad - 0.5)
    out = np.asarray(loss.sum() / count, dtype=pred.dtype)

    def backward(g):
        d = np.where(small, diff, np.sign(diff)) * mask
        return [(d * (g / count)).astype(pred.dtype)]

    return make_result(out, [pred], backward)
