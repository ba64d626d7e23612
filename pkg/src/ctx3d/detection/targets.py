"""Training-target assignment and proposal generation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import as_boxes, decode_bbox, encode_bbox, iou_matrix, nms


@dataclass(frozen=True)
class RpnTargetConfig:
    positive_iou: float = 0.7
    negative_iou: float = 0.3
    batch_size: int = 256
    positive_fraction: float = 0.5


@dataclass(frozen=True)
class ProposalConfig:
    pre_nms_top_n: int = 6000
    post_nms_top_n: int = 100
    nms_thresh: float = 0.7
    min_size: float = 4.0
    # drop anchors crossing the image border, as target assignment ignores them
    inside_anchors_only: bool = True


@dataclass(frozen=True)
class RoiSamplingConfig:
    batch_size: int = 128
    foreground_fraction: float = 0.25
    foreground_iou: float = 0.5
    background_iou_hi: float = 0.5
    background_iou_lo: float = 0.0


def assign_rpn_targets(anchors, gt_boxes, image_size, rng: np.random.Generator,
                       cfg: RpnTargetConfig = RpnTargetConfig()):
    """Label anchors 1 / 0 / -1 (positive / negative / ignored) and build regression targets.

    Returns ``(labels, targets, reg_mask)`` with shapes (A,), (A, 4), (A, 4).
    """
    anchors = as_boxes(anchors)
    gt = as_boxes(gt_boxes)
    h, w = image_size
    n = len(anchors)
    labels = np.full(n, -1, dtype=np.int64)
    targets = np.zeros((n, 4), dtype=np.float64)

    inside = np.nonzero(
        (anchors[:, 0] >= 0) & (anchors[:, 1] >= 0) & (anchors[:, 2] <= w) & (anchors[:, 3] <= h)
    )[0]
    if inside.size:
        if len(gt):
            ov = iou_matrix(anchors[inside], gt)
            best_gt = ov.argmax(axis=1)
            best = ov[np.arange(len(inside)), best_gt]
            labels[inside[best < cfg.negative_iou]] = 0
            gt_best = ov.max(axis=0)
            hit = np.nonzero((ov == gt_best[None, :]) & (gt_best[None, :] > 0))[0]
            labels[inside[hit]] = 1
            labels[inside[best >= cfg.positive_iou]] = 1
            targets[inside] = encode_bbox(gt[best_gt], anchors[inside])
        else:
            labels[inside] = 0

    num_fg = int(cfg.positive_fraction * cfg.batch_size)
    fg = np.nonzero(labels == 1)[0]
    if len(fg) > num_fg:
        labels[rng.choice(fg, len(fg) - num_fg, replace=False)] = -1
    num_bg = cfg.batch_size - int(np.sum(labels == 1))
    bg = np.nonzero(labels == 0)[0]
    if len(bg) > num_bg:
        labels[rng.choice(bg, len(bg) - num_bg, replace=False)] = -1

    reg_mask = np.zeros((n, 4), dtype=np.float64)
    reg_mask[labels == 1] = 1.0
    targets[labels != 1] = 0.0
    return labels, targets, reg_mask


def propose(fg_scores, deltas, anchors, image_size, cfg: ProposalConfig = ProposalConfig()):
    """Decode, clip, filter and suppress RPN outputs.

    Returns ``(boxes, scores)`` sorted by score; equal scores keep anchor order.
    """
    scores = np.asarray(fg_scores, dtype=np.float64).reshape(-1)
    anchors = as_boxes(anchors)
    boxes = decode_bbox(deltas, anchors, image_size)
    ws = boxes[:, 2] - boxes[:, 0]
    hs = boxes[:, 3] - boxes[:, 1]
    ok = (ws >= cfg.min_size) & (hs >= cfg.min_size)
    if cfg.inside_anchors_only:
        h, w = image_size
        ok &= (anchors[:, 0] >= 0) & (anchors[:, 1] >= 0) & (anchors[:, 2] <= w) & (anchors[:, 3] <= h)
    keep = np.nonzero(ok)[0]
    order = keep[np.argsort(-scores[keep], kind="stable")][: cfg.pre_nms_top_n]
    boxes, scores = boxes[order], scores[order]
    kept = nms(boxes, scores, cfg.nms_thresh, cfg.post_nms_top_n)
    return boxes[kept], scores[kept]


def sample_rois(proposals, gt_boxes, rng: np.random.Generator,
                cfg: RoiSamplingConfig = RoiSamplingConfig(), append_gt: bool = True):
    """Pick foreground / background ROIs for the detection head.

    Returns ``(rois, labels, targets, reg_mask)``; foreground rows come first.
    """
    rois = as_boxes(proposals)
    gt = as_boxes(gt_boxes)
    if append_gt and len(gt):
        rois = np.concatenate([rois, gt], axis=0)
    if len(rois) == 0:
        return rois, np.zeros(0, np.int64), np.zeros((0, 4)), np.zeros((0, 4))
    if len(gt):
        ov = iou_matrix(rois, gt)
        best_gt = ov.argmax(axis=1)
        best = ov[np.arange(len(rois)), best_gt]
    else:
        best_gt = np.zeros(len(rois), dtype=np.int64)
        best = np.zeros(len(rois))

    fg = np.nonzero(best >= cfg.foreground_iou)[0]
    bg = np.nonzero((best < cfg.background_iou_hi) & (best >= cfg.background_iou_lo))[0]
    n_fg = min(int(round(cfg.foreground_fraction * cfg.batch_size)), len(fg))
    if len(fg) > n_fg:
        fg = np.sort(rng.choice(fg, n_fg, replace=False))
    n_bg = min(cfg.batch_size - n_fg, len(bg))
    if len(bg) > n_bg:
        bg = np.sort(rng.choice(bg, n_bg, replace=False))

    idx = np.concatenate([fg, bg])
    labels = np.concatenate([np.ones(len(fg), np.int64), np.zeros(len(bg), np.int64)])
    sel = rois[idx]
    targets = np.zeros((len(idx), 4))
    reg_mask = np.zeros((len(idx), 4))
    if len(fg):
        targets[: len(fg)] = encode_bbox(gt[best_gt[fg]], rois[fg])
        reg_mask[: len(fg)] = 1.0
    return sel, labels, targets, reg_mask
