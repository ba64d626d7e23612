"""CT volumes and the CTVOL binary format.

CTVOL layout (little-endian)::

    b"CTVOL\\0", u32 version, u32 nz, u32 ny, u32 nx,
    f32 dz, f32 dy, f32 dx (mm), then nz*ny*nx int16 HU values, z-major.
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

MAGIC = b"CTVOL\0"
VERSION = 1
_HEADER = struct.Struct("<6sIIIIfff")


class VolumeFormatError(ValueError):
    pass


@dataclass
class Volume:
    """HU voxels (nz, ny, nx) with physical spacing (dz, dy, dx) in mm.

    ``dz`` may be NaN for a single-slice scan whose interval is unknown.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    id: str = ""

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"volume needs 3 positive dims, got {self.voxels.shape}")
        dz, dy, dx = (float(s) for s in self.spacing)
        if not (dy > 0 and dx > 0) or not (dz > 0 or (math.isnan(dz) and self.voxels.shape[0] == 1)):
            raise ValueError(f"spacing must be strictly positive, got {self.spacing}")
        self.spacing = (dz, dy, dx)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


def to_hu(values: np.ndarray) -> np.ndarray:
    """Round and saturate to the int16 HU range."""
    return np.clip(np.rint(values), -32768, 32767).astype(np.int16)


def write_volume(path: str | os.PathLike, volume: Volume) -> None:
    nz, ny, nx = volume.shape
    dz, dy, dx = volume.spacing
    header = _HEADER.pack(MAGIC, VERSION, nz, ny, nx, dz, dy, dx)
    body = np.ascontiguousarray(volume.voxels, dtype="<i2").tobytes()
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".vol-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(body)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_volume(path: str | os.PathLike, volume_id: str | None = None) -> Volume:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEADER.size:
        raise VolumeFormatError(f"{path}: file too short for a CTVOL header")
    magic, version, nz, ny, nx, dz, dy, dx = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    count = nz * ny * nx
    if len(buf) != _HEADER.size + 2 * count:
        raise VolumeFormatError(f"{path}: expected {count} voxels, file size {len(buf)}")
    vox = np.frombuffer(buf, dtype="<i2", offset=_HEADER.size).astype(np.int16).reshape(nz, ny, nx)
    if volume_id is None:
        volume_id = os.path.splitext(os.path.basename(path))[0]
    return Volume(vox, (dz, dy, dx), volume_id)
