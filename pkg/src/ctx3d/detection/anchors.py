"""Anchor tiling for the region proposal network."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class AnchorConfig:
    scales: tuple[float, ...] = (16, 24, 32, 48, 96)
    # height / width
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    stride: int = 8

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError(f"anchor scales must be strictly increasing: {self.scales}")
        if self.stride < 1:
            raise ValueError("anchor stride must be >= 1")

    @property
    def num_anchors(self) -> int:
        return len(self.scales) * len(self.ratios)


def base_anchors(cfg: AnchorConfig) -> np.ndarray:
    """Anchors centred on the origin, scale-major then ratio, shape (A, 4).

    A scale is the square root of the anchor area; ratio is height / width.
    """
    out = []
    for s in cfg.scales:
        for r in cfg.ratios:
            w = s / np.sqrt(r)
            h = s * np.sqrt(r)
            out.append([-w / 2, -h / 2, w / 2, h / 2])
    return np.asarray(out, dtype=np.float64)


def generate_anchors(cfg: AnchorConfig, feat_h: int, feat_w: int) -> np.ndarray:
    """All anchors for a feature map, row-major over cells, shape (H*W*A, 4)."""
    if feat_h < 1 or feat_w < 1:
        raise ValueError("feature map dims must be positive")
    base = base_anchors(cfg)
    ys = (np.arange(feat_h) + 0.5) * cfg.stride
    xs = (np.arange(feat_w) + 0.5) * cfg.stride
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    shifts = np.stack([cx, cy, cx, cy], axis=-1).reshape(-1, 1, 4)
    return (shifts + base[None]).reshape(-1, 4)
