"""Turn preprocessed volumes and annotations into detector samples."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .ct.annotations import Annotation
from .ct.pipeline import PIXEL_SPACING, SLICE_INTERVAL, group_indices, window_hu
from .ct.volume import Volume, read_volume
from .model.network import FeatureCache, Model, forward_infer
from .synth import read_manifest


@dataclass
class KeyImage:
    volume_id: str
    key_slice: int
    images: np.ndarray          # (M, 3, H, W) windowed
    slice_indices: np.ndarray   # (M, 3)
    gt_boxes: np.ndarray        # (G, 4)


def windowed_for_model(volume: Volume, stride: int) -> np.ndarray:
    """Window a preprocessed volume and zero-pad H, W up to a multiple of ``stride``."""
    dz, dy, dx = volume.spacing
    if not (math.isclose(dy, PIXEL_SPACING, rel_tol=1e-4) and math.isclose(dx, PIXEL_SPACING, rel_tol=1e-4)
            and (volume.shape[0] == 1 or math.isclose(dz, SLICE_INTERVAL, rel_tol=1e-4))):
        raise ValueError(f"volume {volume.id!r} has spacing {volume.spacing}; run preprocess first")
    win = window_hu(volume.voxels)
    nz, h, w = win.shape
    ph = (-h) % stride
    pw = (-w) % stride
    if ph or pw:
        win = np.pad(win, ((0, 0), (0, ph), (0, pw)))
    return win


def boxes_by_image(annotations) -> dict[tuple[str, int], np.ndarray]:
    grouped = defaultdict(list)
    for a in annotations:
        if a.box is not None:
            grouped[a.image_id].append(a.box)
    return {k: np.asarray(v, dtype=np.float64) for k, v in grouped.items()}


def key_images(volume: Volume, key_slices, m: int, stride: int, gt: dict) -> list[KeyImage]:
    win = windowed_for_model(volume, stride)
    out = []
    for k in key_slices:
        idx = group_indices(win.shape[0], k, m)
        out.append(KeyImage(volume.id, k, np.ascontiguousarray(win[idx]), idx,
                            gt.get((volume.id, k), np.zeros((0, 4)))))
    return out


def load_split(manifest_path, annotations: list[Annotation], m: int, stride: int = 8) -> list[KeyImage]:
    """Key-slice samples for every volume listed in a split manifest."""
    gt = boxes_by_image(annotations)
    out = []
    for vid, path, keys in read_manifest(manifest_path):
        out.extend(key_images(read_volume(path, vid), keys, m, stride, gt))
    return out


def infer_volume(model: Model, volume: Volume, key_slices, use_cache: bool = True):
    """Run the detector on each key slice; returns ``{key: (boxes, scores)}`` and the cache."""
    cfg = model.cfg
    win = windowed_for_model(volume, cfg.stride)
    cache = FeatureCache(enabled=use_cache)
    out = {}
    for k in key_slices:
        idx = group_indices(win.shape[0], k, cfg.M)
        keys = [(volume.id, tuple(int(i) for i in row)) for row in idx]
        out[k] = forward_infer(model, win[idx], cache=cache, image_keys=keys)
    return out, cache
