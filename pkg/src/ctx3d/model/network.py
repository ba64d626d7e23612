"""The 3D-context-enhanced region detector.

M three-channel images of a sample share one convolutional stack. Only the
central image feeds the RPN; every image passes the shared Conv6, and the M
Conv6 maps are concatenated before position-sensitive pooling, so the head
classifies each proposal from features of all M images.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .. import nn
from ..detection.anchors import generate_anchors
from ..detection.boxes import decode_bbox, nms
from ..detection.psroi import psroi_pool
from ..detection.targets import assign_rpn_targets, propose, sample_rois
from ..nn import Tensor
from .config import BACKBONES, POOLED_STAGES, ModelConfig


class Model:
    def __init__(self, cfg: ModelConfig, params: "OrderedDict[str, Tensor]"):
        self.cfg = cfg
        self.params = params
        self._anchor_cache: dict[tuple[int, int], np.ndarray] = {}

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "Model":
        params = OrderedDict((k, Tensor(v.data.astype(dtype), requires_grad=True)) for k, v in self.params.items())
        return Model(self.cfg, params)

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def anchors(self, feat_h: int, feat_w: int) -> np.ndarray:
        key = (feat_h, feat_w)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = generate_anchors(self.cfg.anchor_config(), feat_h, feat_w)
        return self._anchor_cache[key]

    def backbone_layers(self) -> list[tuple[str, bool]]:
        """(conv name, pool after) in execution order."""
        layers = []
        for s, (_, convs) in enumerate(BACKBONES[self.cfg.backbone], start=1):
            for k in range(1, convs + 1):
                layers.append((f"conv{s}_{k}", k == convs and s <= POOLED_STAGES))
        return layers


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    """Randomly initialised detector for ``cfg``.

    The backbone uses He-normal weights (it would be pretrained in a full
    run); new layers draw from N(0, init_std), regression outputs from
    N(0, init_std_reg); biases start at 0.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    params: OrderedDict[str, Tensor] = OrderedDict()

    def add(name, shape, std):
        params[name + ".weight"] = Tensor(rng.normal(0.0, std, shape).astype(np.float32), requires_grad=True)
        out = shape[0] if len(shape) == 4 else shape[1]
        params[name + ".bias"] = Tensor(np.zeros(out, np.float32), requires_grad=True)

    cin = 3
    for s, (width, convs) in enumerate(BACKBONES[cfg.backbone], start=1):
        for k in range(1, convs + 1):
            add(f"conv{s}_{k}", (width, cin, 3, 3), np.sqrt(2.0 / (cin * 9)))
            cin = width
    a = cfg.num_anchors
    add("rpn_conv", (cin, cin, 3, 3), cfg.init_std)
    add("rpn_cls", (2 * a, cin, 1, 1), cfg.init_std)
    add("rpn_reg", (4 * a, cin, 1, 1), cfg.init_std_reg)
    add("conv6", (cfg.conv6_channels, cin, 1, 1), cfg.init_std)
    add("fc7", (cfg.pooled_channels * cfg.S * cfg.S, cfg.fc7_width), cfg.init_std)
    add("cls_score", (cfg.fc7_width, 2), cfg.init_std)
    add("bbox_pred", (cfg.fc7_width, 4), cfg.init_std_reg)
    return Model(cfg, params)


# ---------------------------------------------------------------------------
# graph pieces
# ---------------------------------------------------------------------------

def normalize(model: Model, images: np.ndarray) -> Tensor:
    cfg = model.cfg
    x = (np.asarray(images, dtype=np.float64) - cfg.pixel_mean) / cfg.pixel_std
    return Tensor(x.astype(model.dtype))


def backbone(model: Model, x: Tensor) -> Tensor:
    """Conv1-5 on (N, 3, H, W) images; returns the stride-8 Conv5 map."""
    if x.shape[2] % model.cfg.stride or x.shape[3] % model.cfg.stride:
        raise ValueError(f"input {x.shape[2]}x{x.shape[3]} not divisible by stride {model.cfg.stride}")
    for name, pool in model.backbone_layers():
        x = nn.relu(nn.conv2d(x, model[name + ".weight"], model[name + ".bias"], stride=1, pad=1))
        if pool:
            x = nn.max_pool2(x)
    return x


def conv6(model: Model, conv5: Tensor) -> Tensor:
    return nn.conv2d(conv5, model["conv6.weight"], model["conv6.bias"])


def rpn_head(model: Model, conv5: Tensor) -> tuple[Tensor, Tensor]:
    """Per-anchor logits (N*H*W*A, 2) and deltas (N*H*W*A, 4), rows in anchor order."""
    a = model.cfg.num_anchors
    n, _, h, w = conv5.shape
    t = nn.relu(nn.conv2d(conv5, model["rpn_conv.weight"], model["rpn_conv.bias"], pad=1))
    cls = nn.conv2d(t, model["rpn_cls.weight"], model["rpn_cls.bias"])
    reg = nn.conv2d(t, model["rpn_reg.weight"], model["rpn_reg.bias"])
    cls = nn.reshape(nn.transpose(nn.reshape(cls, (n, a, 2, h, w)), (0, 3, 4, 1, 2)), (n * h * w * a, 2))
    reg = nn.reshape(nn.transpose(nn.reshape(reg, (n, a, 4, h, w)), (0, 3, 4, 1, 2)), (n * h * w * a, 4))
    return cls, reg


def fuse(maps: list[Tensor]) -> Tensor:
    """Concatenate per-image Conv6 maps (each (1, S*S*D, h, w)) in z order."""
    return nn.concat_channels(maps)


def detection_head(model: Model, fused: Tensor, rois: np.ndarray) -> tuple[Tensor, Tensor]:
    cfg = model.cfg
    pooled = psroi_pool(fused, rois, cfg.S, cfg.stride)
    flat = nn.reshape(pooled, (pooled.shape[0], -1))
    fc7 = nn.relu(nn.fully_connected(flat, model["fc7.weight"], model["fc7.bias"]))
    cls = nn.fully_connected(fc7, model["cls_score.weight"], model["cls_score.bias"])
    reg = nn.fully_connected(fc7, model["bbox_pred.weight"], model["bbox_pred.bias"])
    return cls, reg


# ---------------------------------------------------------------------------
# training graph
# ---------------------------------------------------------------------------

@dataclass
class Assignment:
    """Sampled targets for one sample; reusable to freeze the loss surface."""

    rpn_labels: np.ndarray
    rpn_targets: np.ndarray
    rpn_mask: np.ndarray
    rois: np.ndarray
    roi_labels: np.ndarray
    roi_targets: np.ndarray
    roi_mask: np.ndarray


LOSS_NAMES = ("rpn_cls", "rpn_reg", "head_cls", "head_reg")


@dataclass
class Losses:
    rpn_cls: Tensor
    rpn_reg: Tensor
    head_cls: Tensor
    head_reg: Tensor
    total: Tensor
    assignments: list[Assignment] = field(default_factory=list)

    def values(self) -> dict[str, float]:
        out = {k: float(getattr(self, k).data) for k in LOSS_NAMES}
        out["total"] = float(self.total.data)
        return out


def sample_losses(model: Model, conv5_center: Tensor, conv6_maps: list[Tensor], gt_boxes,
                  image_size: tuple[int, int], rng: np.random.Generator | None,
                  frozen: Assignment | None = None):
    """The four loss terms for one sample, given its feature maps."""
    cfg = model.cfg
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    _, _, fh, fw = conv5_center.shape
    anchors = model.anchors(fh, fw)
    rpn_cls, rpn_reg = rpn_head(model, conv5_center)

    if frozen is None:
        labels, targets, mask = assign_rpn_targets(anchors, gt, image_size, rng, cfg.rpn_target_config())
        fg = nn.softmax(rpn_cls.data.astype(np.float64))[:, 1]
        proposals, _ = propose(fg, rpn_reg.data, anchors, image_size, cfg.proposal_config(training=True))
        rois, roi_labels, roi_targets, roi_mask = sample_rois(proposals, gt, rng, cfg.roi_config())
        frozen = Assignment(labels, targets, mask, rois, roi_labels, roi_targets, roi_mask)

    l_rpn_cls = nn.softmax_cross_entropy(rpn_cls, frozen.rpn_labels, ignore_label=-1)
    l_rpn_reg = nn.smooth_l1(rpn_reg, frozen.rpn_targets, frozen.rpn_mask)
    fused = fuse(conv6_maps)
    head_cls, head_reg = detection_head(model, fused, frozen.rois)
    l_head_cls = nn.softmax_cross_entropy(head_cls, frozen.roi_labels)
    l_head_reg = nn.smooth_l1(head_reg, frozen.roi_targets, frozen.roi_mask)
    return (l_rpn_cls, l_rpn_reg, l_head_cls, l_head_reg), frozen


def forward_train(model: Model, samples, rng: np.random.Generator | None = None,
                  frozen: list[Assignment] | None = None) -> Losses:
    """Losses averaged over a minibatch of ``(images (M,3,H,W), gt_boxes)`` samples.

    total = rpn_cls + rpn_reg + head_cls + w * head_reg with w the box-regression weight.
    Pass ``frozen`` (the ``assignments`` of an earlier call) to reuse targets.
    """
    cfg = model.cfg
    samples = list(samples)
    images = np.stack([np.asarray(img) for img, _ in samples])
    b, m = images.shape[:2]
    if m != cfg.M:
        raise ValueError(f"sample has {m} images but model expects M={cfg.M}")
    h, w = images.shape[3:]
    x = normalize(model, images.reshape(b * m, 3, h, w))
    conv5 = backbone(model, x)
    c6 = nn.split_batch(conv6(model, conv5), [1] * (b * m))
    c5 = nn.split_batch(conv5, [1] * (b * m))

    terms = [[] for _ in LOSS_NAMES]
    assignments = []
    for i, (_, gt) in enumerate(samples):
        center = c5[i * m + m // 2]
        parts, a = sample_losses(model, center, c6[i * m:(i + 1) * m], gt, (h, w), rng,
                                 None if frozen is None else frozen[i])
        assignments.append(a)
        for bucket, t in zip(terms, parts):
            bucket.append(t)
    means = [nn.scale(nn.add(*bucket), 1.0 / b) for bucket in terms]
    total = nn.add(means[0], means[1], means[2], nn.scale(means[3], cfg.bbox_reg_loss_weight))
    return Losses(*means, total, assignments)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

class FeatureCache:
    """Per-image (Conv5, Conv6) maps keyed by the image's source slice indices.

    Neighbouring key slices of one volume share most of their images; each
    image is computed once. A disabled cache recomputes every time through the
    same per-image path, so results are identical either way.
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.store: dict[object, tuple[Tensor, Tensor]] = {}
        self.hits = 0
        self.misses = 0

    def get(self, model: Model, key, image: np.ndarray) -> tuple[Tensor, Tensor]:
        if self.enabled and key in self.store:
            self.hits += 1
            return self.store[key]
        self.misses += 1
        c5 = backbone(model, normalize(model, image[None]))
        value = (c5, conv6(model, c5))
        if self.enabled:
            self.store[key] = value
        return value


def forward_infer(model: Model, images: np.ndarray, cache: FeatureCache | None = None,
                  image_keys=None) -> tuple[np.ndarray, np.ndarray]:
    """Detections for one sample: ``(boxes (K, 4), scores (K,))`` sorted by score."""
    cfg = model.cfg
    images = np.asarray(images)
    m, _, h, w = images.shape
    if m != cfg.M:
        raise ValueError(f"sample has {m} images but model expects M={cfg.M}")
    cache = cache or FeatureCache(enabled=False)
    keys = image_keys if image_keys is not None else [None] * m
    feats = [cache.get(model, keys[j] if keys[j] is not None else ("anon", id(images), j), images[j])
             for j in range(m)]
    center = feats[m // 2][0]
    rpn_cls, rpn_reg = rpn_head(model, center)
    anchors = model.anchors(center.shape[2], center.shape[3])
    fg = nn.softmax(rpn_cls.data.astype(np.float64))[:, 1]
    rois, _ = propose(fg, rpn_reg.data, anchors, (h, w), cfg.proposal_config(training=False))
    if len(rois) == 0:
        return np.zeros((0, 4)), np.zeros(0)
    cls, reg = detection_head(model, fuse([f[1] for f in feats]), rois)
    scores = nn.softmax(cls.data.astype(np.float64))[:, 1]
    boxes = decode_bbox(reg.data, rois, (h, w))
    ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    boxes, scores = boxes[ok], scores[ok]
    keep = nms(boxes, scores, cfg.test_nms_thresh)[: cfg.max_detections]
    return boxes[keep], scores[keep]
