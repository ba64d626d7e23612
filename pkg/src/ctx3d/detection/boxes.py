"""Box geometry on (x1, y1, x2, y2) arrays with exclusive upper edges."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Detection:
    image_id: tuple
    box: tuple[float, float, float, float]
    score: float


def as_boxes(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    return arr.reshape(-1, 4)


def area(boxes) -> np.ndarray:
    b = as_boxes(boxes)
    return np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)


def intersection(a, b) -> np.ndarray:
    """Pairwise intersection areas, shape (len(a), len(b))."""
    a = as_boxes(a)
    b = as_boxes(b)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    return np.clip(iw, 0, None) * np.clip(ih, 0, None)


def iou_matrix(a, b) -> np.ndarray:
    inter = intersection(a, b)
    union = area(a)[:, None] + area(b)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def iobb_matrix(gt, det) -> np.ndarray:
    """Intersection over the detected box area; rows index gt, columns det."""
    inter = intersection(gt, det)
    det_area = area(det)[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(det_area > 0, inter / det_area, 0.0)
    return out


def iou(a, b) -> float:
    return float(iou_matrix(a, b)[0, 0])


def iobb(gt, det) -> float:
    return float(iobb_matrix(gt, det)[0, 0])


def _center_form(b: np.ndarray):
    w = b[:, 2] - b[:, 0]
    h = b[:, 3] - b[:, 1]
    return b[:, 0] + 0.5 * w, b[:, 1] + 0.5 * h, w, h


def encode_bbox(gt, anchors) -> np.ndarray:
    """Regression targets (tx, ty, tw, th) taking ``anchors`` onto ``gt``."""
    gx, gy, gw, gh = _center_form(as_boxes(gt))
    ax, ay, aw, ah = _center_form(as_boxes(anchors))
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1)


# exp() argument cap; keeps decoded sizes finite for wild early-training deltas
_MAX_LOG_RATIO = np.log(1000.0 / 16)


def decode_bbox(deltas, anchors, image_size: tuple[int, int] | None = None) -> np.ndarray:
    """Inverse of :func:`encode_bbox`; clipped to ``[0, W] x [0, H]`` when ``image_size=(H, W)``."""
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    ax, ay, aw, ah = _center_form(as_boxes(anchors))
    cx = d[:, 0] * aw + ax
    cy = d[:, 1] * ah + ay
    w = aw * np.exp(np.minimum(d[:, 2], _MAX_LOG_RATIO))
    h = ah * np.exp(np.minimum(d[:, 3], _MAX_LOG_RATIO))
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    if image_size is not None:
        out = clip_boxes(out, image_size)
    return out


def clip_boxes(boxes, image_size: tuple[int, int]) -> np.ndarray:
    h, w = image_size
    b = as_boxes(boxes).copy()
    b[:, [0, 2]] = np.clip(b[:, [0, 2]], 0, w)
    b[:, [1, 3]] = np.clip(b[:, [1, 3]], 0, h)
    return b


def nms(boxes, scores, overlap_thresh: float, max_keep: int | None = None) -> np.ndarray:
    """Greedy non-maximum suppression.

    Returns kept indices sorted by descending score; equal scores keep input
    order. A box is dropped when its IoU with a kept box exceeds the threshold.
    ``max_keep`` stops the sweep once that many boxes are kept.
    """
    b = as_boxes(boxes)
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="stable")
    b = b[order]
    limit = len(b) if max_keep is None else max_keep
    keep: list[int] = []
    chunk = 64
    for start in range(0, len(b), chunk):
        block = b[start:start + chunk]
        alive = np.ones(len(block), dtype=bool)
        if keep:
            alive &= ~(iou_matrix(b[keep], block) > overlap_thresh).any(axis=0)
        inner = iou_matrix(block, block) > overlap_thresh
        for j in range(len(block)):
            if not alive[j]:
                continue
            keep.append(start + j)
            if len(keep) >= limit:
                return order[np.asarray(keep, dtype=np.int64)]
            alive[j + 1:] &= ~inner[j, j + 1:]
    return order[np.asarray(keep, dtype=np.int64)]
