"""Position-sensitive ROI average pooling."""

from __future__ import annotations

import numpy as np

from ..nn.tensor import Tensor, make_result


def _bin_bounds(rois: np.ndarray, size: int, stride: int, h: int, w: int):
    r = rois / float(stride)
    x1, y1, x2, y2 = r[:, 0:1], r[:, 1:2], r[:, 2:3], r[:, 3:4]
    steps = np.arange(size)[None, :]
    bw = (x2 - x1) / size
    bh = (y2 - y1) / size
    ws = np.clip(np.floor(x1 + steps * bw), 0, w).astype(np.int64)
    we = np.clip(np.ceil(x1 + (steps + 1) * bw), 0, w).astype(np.int64)
    hs = np.clip(np.floor(y1 + steps * bh), 0, h).astype(np.int64)
    he = np.clip(np.ceil(y1 + (steps + 1) * bh), 0, h).astype(np.int64)
    return hs, he, ws, we


def psroi_pool(feature: Tensor, rois, size: int, stride: int) -> Tensor:
    """Average-pool each ROI bin (i, j) from its own channel group.

    ``feature`` is (1, size*size*C, H, W). Output bin (c, i, j) averages
    channel ``c*size*size + i*size + j`` over the bin's cells; bins that are
    empty after rounding to cells are 0. Result shape (R, C, size, size).

    Bin sums use 0/1 row and column indicator matrices rather than an
    integral image, so cells outside a bin contribute exactly nothing.
    """
    if feature.ndim != 4 or feature.shape[0] != 1:
        raise ValueError(f"psroi_pool expects a (1, K, H, W) map, got {feature.shape}")
    _, k, h, w = feature.shape
    s2 = size * size
    if k % s2:
        raise ValueError(f"psroi_pool: {k} channels not divisible by {s2}")
    c = k // s2
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    if len(rois) == 0:
        raise ValueError("psroi_pool needs at least one ROI")
    dtype = feature.dtype

    hs, he, ws, we = _bin_bounds(rois, size, stride, h, w)
    yy = np.arange(h)
    xx = np.arange(w)
    my = ((yy >= hs[:, :, None]) & (yy < he[:, :, None])).astype(np.float64)   # (R, S, H)
    mx = ((xx >= ws[:, :, None]) & (xx < we[:, :, None])).astype(np.float64)   # (R, S, W)
    cells = my.sum(2)[:, None, :, None] * mx.sum(2)[:, None, None, :]          # (R, 1, S, S)
    inv = np.where(cells > 0, 1.0 / np.maximum(cells, 1), 0.0)

    r = len(rois)
    # (S_i, H, C, S_j, W) so each row band is one matmul
    fmap = feature.data[0].astype(np.float64).reshape(c, size, size, h, w).transpose(1, 3, 0, 2, 4)
    total = np.empty((r, c, size, size))
    for i in range(size):
        band = (my[:, i, :] @ fmap[i].reshape(h, -1)).reshape(r, c, size, w)   # (R, C, S_j, W)
        total[:, :, i, :] = np.einsum("ncjx,njx->ncj", band, mx)
    out = (total * inv).astype(dtype)

    def backward(g):
        gs = g.astype(np.float64) * inv                                       # (R, C, S, S)
        grad = np.empty((size, h, c, size, w))
        for i in range(size):
            t = gs[:, :, i, :, None] * mx[:, None, :, :]                      # (R, C, S_j, W)
            grad[i] = (my[:, i, :].T @ t.reshape(r, -1)).reshape(h, c, size, w)
        return [grad.transpose(2, 0, 3, 1, 4).reshape(1, k, h, w).astype(dtype)]

    return make_result(out, [feature], backward)
