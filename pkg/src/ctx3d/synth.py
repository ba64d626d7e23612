"""Synthetic CT volumes: spherical lesions plus thin look-alike confusers.

A confuser is a slab of a sphere, ``confuser_thickness`` slices thick,
centred on a lesion's key slice. Within its slab every slice is pixel-for-pixel
the cross-section a sphere of the same radius would have, so an observer
limited to that many slices cannot tell the two apart. Only lesions are
annotated.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .ct.annotations import Annotation, write_annotations
from .ct.volume import Volume, to_hu, write_volume


@dataclass(frozen=True)
class SynthConfig:
    shape: tuple[int, int, int] = (40, 128, 128)
    spacing: tuple[float, float, float] = (2.0, 0.8, 0.8)
    n_lesions: int = 2
    n_confusers: int = 4
    radius_mm: tuple[float, float] = (6.0, 10.0)
    confuser_thickness: int = 1
    background_hu: float = -50.0
    object_offset_hu: float = 120.0
    noise_std_hu: float = 15.0
    margin_mm: float = 2.0
    max_retries: int = 2000

    def validate(self) -> None:
        if min(self.shape) < 1 or min(self.spacing) <= 0:
            raise ValueError("synth: shape and spacing must be positive")
        if self.radius_mm[0] < 2 * self.spacing[0] or self.radius_mm[1] < self.radius_mm[0]:
            raise ValueError("synth: lesion radius must be >= 2 slice intervals so spheres span >= 3 slices")
        if self.confuser_thickness < 1 or self.confuser_thickness % 2 == 0:
            raise ValueError("synth: confuser thickness must be a positive odd slice count")
        if self.n_confusers and not self.n_lesions:
            raise ValueError("synth: confusers are placed on lesion key slices, so need >= 1 lesion")


@dataclass(frozen=True)
class SynthObject:
    kind: str            # "lesion" or "confuser"
    center_mm: tuple[float, float, float]
    radius_mm: float

    def slice_radius(self, kz: int, dz: float, thickness: int) -> float:
        """Cross-section radius on slice ``kz`` (0 if the slice misses the object)."""
        zc = self.center_mm[0]
        if self.kind == "confuser" and abs(kz * dz - zc) > (thickness - 1) / 2 * dz + 1e-9:
            return 0.0
        d2 = self.radius_mm ** 2 - (kz * dz - zc) ** 2
        return math.sqrt(d2) if d2 > 1e-12 else 0.0


@dataclass
class SynthVolume:
    volume: Volume
    objects: list[SynthObject]
    annotations: list[Annotation]
    key_slices: list[int] = field(default_factory=list)
    masks: np.ndarray | None = None   # object index + 1 per voxel, 0 for background


def _place(cfg: SynthConfig, rng: np.random.Generator) -> list[SynthObject]:
    nz, ny, nx = cfg.shape
    dz, dy, dx = cfg.spacing
    objects: list[SynthObject] = []

    def free(c, r):
        for o in objects:
            if math.dist(c, o.center_mm) <= r + o.radius_mm + cfg.margin_mm:
                return False
        return True

    def inplane(r):
        if 2 * r > min(ny * dy, nx * dx):
            raise ValueError(f"synth: a {r:.1f}mm object does not fit in a {ny * dy:.1f}x{nx * dx:.1f}mm slice")
        return (rng.uniform(r, ny * dy - r), rng.uniform(r, nx * dx - r))

    for _ in range(cfg.n_lesions):
        for _attempt in range(cfg.max_retries):
            r = rng.uniform(*cfg.radius_mm)
            lo = math.ceil(r / dz)
            hi = nz - 1 - lo
            if hi < lo:
                raise ValueError(f"synth: volume too thin for a {r:.1f}mm sphere")
            c = (int(rng.integers(lo, hi + 1)) * dz, *inplane(r))
            if free(c, r):
                objects.append(SynthObject("lesion", c, r))
                break
        else:
            raise RuntimeError(f"synth: could not place lesion {len(objects)} after {cfg.max_retries} tries")

    lesions = list(objects)
    for i in range(cfg.n_confusers):
        zc = lesions[i % len(lesions)].center_mm[0]
        for _attempt in range(cfg.max_retries):
            r = rng.uniform(*cfg.radius_mm)
            c = (zc, *inplane(r))
            if free(c, r):
                objects.append(SynthObject("confuser", c, r))
                break
        else:
            raise RuntimeError(f"synth: could not place confuser {i} after {cfg.max_retries} tries")
    return objects


def generate_volume(cfg: SynthConfig, seed, volume_id: str = "synth") -> SynthVolume:
    """Render one volume and its per-slice lesion boxes; deterministic in ``seed``."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    objects = _place(cfg, rng)
    nz, ny, nx = cfg.shape
    dz, dy, dx = cfg.spacing

    yc = (np.arange(ny) + 0.5) * dy
    xc = (np.arange(nx) + 0.5) * dx
    labels = np.zeros(cfg.shape, dtype=np.int16)
    annotations = []
    for idx, obj in enumerate(objects):
        _, oy, ox = obj.center_mm
        d2 = (yc[:, None] - oy) ** 2 + (xc[None, :] - ox) ** 2
        for kz in range(nz):
            r = obj.slice_radius(kz, dz, cfg.confuser_thickness)
            if r <= 0:
                continue
            labels[kz][d2 <= r * r] = idx + 1
            if obj.kind == "lesion":
                box = (ox / dx - r / dx, oy / dy - r / dy, ox / dx + r / dx, oy / dy + r / dy)
                annotations.append(Annotation(volume_id, kz, box, 0, 2 * r, dz))

    hu = cfg.background_hu + cfg.object_offset_hu * (labels > 0) + rng.normal(0.0, cfg.noise_std_hu, cfg.shape)
    annotations.sort(key=lambda a: (a.key_slice, a.box))
    keys = sorted({int(round(o.center_mm[0] / dz)) for o in objects if o.kind == "lesion"})
    vol = Volume(to_hu(hu), cfg.spacing, volume_id)
    return SynthVolume(vol, objects, annotations, keys, labels)


@dataclass
class SynthDataset:
    volumes: list[SynthVolume]
    splits: dict[str, list[str]]


def split_counts(n: int) -> tuple[int, int, int]:
    """70/15/15 by volume: validation and test are floored, the remainder trains."""
    if n < 3:
        raise ValueError("need at least 3 volumes to split")
    n_val = max(1, int(math.floor(0.15 * n)))
    n_test = max(1, int(math.floor(0.15 * n)))
    return n - n_val - n_test, n_val, n_test


def generate_dataset(cfg: SynthConfig, n_volumes: int, seed: int) -> SynthDataset:
    n_train, n_val, _ = split_counts(n_volumes)
    children = np.random.SeedSequence(seed).spawn(n_volumes + 1)
    volumes = [generate_volume(cfg, children[i], f"vol{i:04d}") for i in range(n_volumes)]
    order = np.random.default_rng(children[-1]).permutation(n_volumes)
    ids = [volumes[i].volume.id for i in order]
    splits = {
        "train": sorted(ids[:n_train]),
        "val": sorted(ids[n_train:n_train + n_val]),
        "test": sorted(ids[n_train + n_val:]),
    }
    return SynthDataset(volumes, splits)


MANIFEST_FIELDS = ["volume_id", "path", "key_slices"]


def write_dataset(dataset: SynthDataset, out_dir: str | os.PathLike) -> dict[str, str]:
    """Write volumes, annotations.csv and one manifest CSV per split; returns written paths."""
    os.makedirs(os.path.join(out_dir, "volumes"), exist_ok=True)
    by_id = {v.volume.id: v for v in dataset.volumes}
    written = {}
    for v in dataset.volumes:
        rel = os.path.join("volumes", f"{v.volume.id}.ctvol")
        write_volume(os.path.join(out_dir, rel), v.volume)
        written[rel] = os.path.join(out_dir, rel)
    ann = [a for v in dataset.volumes for a in v.annotations]
    write_annotations(os.path.join(out_dir, "annotations.csv"), ann)
    written["annotations.csv"] = os.path.join(out_dir, "annotations.csv")
    for split, ids in dataset.splits.items():
        path = os.path.join(out_dir, f"{split}.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(MANIFEST_FIELDS)
            for vid in ids:
                w.writerow([vid, os.path.join("volumes", f"{vid}.ctvol"),
                            ";".join(str(k) for k in by_id[vid].key_slices)])
        written[f"{split}.csv"] = path
    return written


def read_manifest(path: str | os.PathLike) -> list[tuple[str, str, list[int]]]:
    """Rows of ``(volume_id, absolute volume path, key slices)``."""
    base = os.path.dirname(os.path.abspath(path))
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            keys = [int(k) for k in row["key_slices"].split(";") if k != ""]
            p = row["path"]
            rows.append((row["volume_id"], p if os.path.isabs(p) else os.path.join(base, p), keys))
    return rows
