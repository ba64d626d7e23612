"""Intensity windowing, resampling to 0.8mm x 0.8mm x 2mm, border clipping, slice grouping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .volume import Volume, to_hu

HU_MIN = -1024.0
HU_MAX = 3071.0
PIXEL_SPACING = 0.8
SLICE_INTERVAL = 2.0
BORDER_THRESHOLD = 1.0


def window_hu(hu) -> np.ndarray:
    """Map HU linearly so that -1024 -> 0 and 3071 -> 255, clamping outside."""
    if isinstance(hu, Volume):
        hu = hu.voxels
    x = np.asarray(hu, dtype=np.float64)
    return np.clip((x - HU_MIN) * (255.0 / (HU_MAX - HU_MIN)), 0.0, 255.0).astype(np.float32)


def _interp_axis(arr: np.ndarray, axis: int, coords: np.ndarray) -> np.ndarray:
    """Linear interpolation of ``arr`` at fractional indices along ``axis`` (edge-clamped)."""
    n = arr.shape[axis]
    coords = np.clip(coords, 0, n - 1)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    t = coords - lo
    shape = [1] * arr.ndim
    shape[axis] = -1
    t = t.reshape(shape)
    a = np.take(arr, lo, axis=axis).astype(np.float64)
    b = np.take(arr, hi, axis=axis).astype(np.float64)
    return a * (1 - t) + b * t


def _output_dim(n: int, spacing: float, target: float) -> int:
    out = int(round(n * spacing / target))
    if out < 1:
        raise ValueError(f"resampling {n} px at {spacing}mm to {target}mm gives an empty axis")
    return out


def resample_inplane(volume: Volume, target_spacing: float = PIXEL_SPACING) -> Volume:
    """Bilinear in-plane resampling so each pixel covers ``target_spacing`` mm.

    Output pixel ``j`` has its centre at ``(j + 0.5) * target`` mm.
    """
    dz, dy, dx = volume.spacing
    nz, ny, nx = volume.shape
    oy = _output_dim(ny, dy, target_spacing)
    ox = _output_dim(nx, dx, target_spacing)
    if math.isclose(dy, target_spacing, rel_tol=1e-6) and math.isclose(dx, target_spacing, rel_tol=1e-6):
        return Volume(volume.voxels.copy(), (dz, target_spacing, target_spacing), volume.id)
    ys = (np.arange(oy) + 0.5) * target_spacing / dy - 0.5
    xs = (np.arange(ox) + 0.5) * target_spacing / dx - 0.5
    out = _interp_axis(volume.voxels, 1, ys)
    out = _interp_axis(out, 2, xs)
    return Volume(to_hu(out), (dz, target_spacing, target_spacing), volume.id)


def z_grid(nz: int, dz: float, target: float = SLICE_INTERVAL) -> np.ndarray:
    """Fractional source indices of a ``target``-mm grid covering the scan extent."""
    extent = (nz - 1) * dz
    count = int(math.floor(extent / target + 1e-6)) + 1
    return np.arange(count) * (target / dz)


def resample_z(volume: Volume, target_interval: float = SLICE_INTERVAL) -> Volume:
    """Linear interpolation along z onto a ``target_interval`` grid starting at slice 0."""
    dz, dy, dx = volume.spacing
    nz = volume.shape[0]
    if nz == 1:
        if not dz > 0:
            raise ValueError("single-slice volume with unknown slice interval cannot be resampled")
        return Volume(volume.voxels.copy(), (target_interval, dy, dx), volume.id)
    if math.isclose(dz, target_interval, rel_tol=1e-6):
        return Volume(volume.voxels.copy(), (target_interval, dy, dx), volume.id)
    out = _interp_axis(volume.voxels, 0, z_grid(nz, dz, target_interval))
    return Volume(to_hu(out), (target_interval, dy, dx), volume.id)


def border_extent(windowed: np.ndarray, threshold: float = BORDER_THRESHOLD) -> tuple[int, int, int, int]:
    """Rows/cols kept after dropping dark borders: ``(y0, y1, x0, x1)``, exclusive ends."""
    proj = np.asarray(windowed).max(axis=0)
    rows = np.nonzero(proj.max(axis=1) >= threshold)[0]
    cols = np.nonzero(proj.max(axis=0) >= threshold)[0]
    if rows.size == 0 or cols.size == 0:
        raise ValueError("volume is entirely below the border threshold")
    return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1


def clip_borders(windowed: np.ndarray, threshold: float = BORDER_THRESHOLD):
    """Crop dark leading/trailing rows and columns.

    Returns ``(cropped, (y_offset, x_offset))``; subtract the offsets from box
    coordinates to keep them on the same anatomy.
    """
    y0, y1, x0, x1 = border_extent(windowed, threshold)
    return np.ascontiguousarray(np.asarray(windowed)[:, y0:y1, x0:x1]), (y0, x0)


@dataclass
class BoxTransform:
    """Maps source pixel coordinates / slice indices into preprocessed space."""

    sy: float = 1.0
    sx: float = 1.0
    y_offset: int = 0
    x_offset: int = 0
    z_factor: float = 1.0

    def boxes(self, boxes) -> np.ndarray:
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
        b[:, [0, 2]] = b[:, [0, 2]] * self.sx - self.x_offset
        b[:, [1, 3]] = b[:, [1, 3]] * self.sy - self.y_offset
        return b

    def slice_index(self, k: int) -> int:
        return int(round(k * self.z_factor))


def preprocess(volume: Volume, threshold: float = BORDER_THRESHOLD) -> tuple[Volume, BoxTransform]:
    """Resample to 0.8mm pixels and 2mm slices, then crop dark borders (HU output)."""
    dz, dy, dx = volume.spacing
    v = resample_inplane(volume)
    v = resample_z(v)
    y0, y1, x0, x1 = border_extent(window_hu(v.voxels), threshold)
    cropped = Volume(np.ascontiguousarray(v.voxels[:, y0:y1, x0:x1]), v.spacing, v.id)
    z_factor = dz / SLICE_INTERVAL if volume.shape[0] > 1 else 0.0
    if math.isclose(z_factor, 1.0, rel_tol=1e-6):
        z_factor = 1.0
    sy, sx = dy / PIXEL_SPACING, dx / PIXEL_SPACING
    if v.voxels.shape[1:] == volume.shape[1:] and math.isclose(sy, 1.0, rel_tol=1e-6) \
            and math.isclose(sx, 1.0, rel_tol=1e-6):
        sy = sx = 1.0      # resampling was skipped; float32 spacing must not nudge boxes
    return cropped, BoxTransform(sy, sx, y0, x0, z_factor)


@dataclass
class SliceGroup:
    """``images`` has shape (M, 3, H, W); the key slice is the middle channel of the middle image."""

    images: np.ndarray
    key_slice: int
    slice_indices: np.ndarray
    spacing: tuple[float, float, float] = (SLICE_INTERVAL, PIXEL_SPACING, PIXEL_SPACING)

    @property
    def M(self) -> int:
        return self.images.shape[0]


def group_indices(nz: int, key_slice: int, m: int) -> np.ndarray:
    """Slice indices of the 3M-slice window centred on ``key_slice``, edge-replicated, shape (M, 3)."""
    if m < 1 or m % 2 == 0:
        raise ValueError(f"M must be odd and >= 1, got {m}")
    if not 0 <= key_slice < nz:
        raise ValueError(f"key slice {key_slice} outside volume of {nz} slices")
    half = (3 * m) // 2
    idx = np.arange(key_slice - half, key_slice + half + 1)
    return np.clip(idx, 0, nz - 1).reshape(m, 3)


def group_slices(windowed: np.ndarray, key_slice: int, m: int) -> SliceGroup:
    """Pack 3M consecutive slices around ``key_slice`` into M three-channel images."""
    windowed = np.asarray(windowed, dtype=np.float32)
    idx = group_indices(windowed.shape[0], key_slice, m)
    return SliceGroup(np.ascontiguousarray(windowed[idx]), key_slice, idx)
