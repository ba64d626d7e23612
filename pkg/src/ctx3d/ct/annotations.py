"""Annotation CSV: ``volume_id,key_slice,x1,y1,x2,y2,type,diameter_mm``.

An optional trailing ``slice_interval_mm`` column carries the source scan's
slice interval for stratified reports. A row with empty coordinates declares
an image that has no lesions.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

LESION_TYPES = ("LU", "ME", "LV", "ST", "PV", "AB", "KD", "BN")
FIELDS = ["volume_id", "key_slice", "x1", "y1", "x2", "y2", "type", "diameter_mm"]


@dataclass(frozen=True)
class Annotation:
    volume_id: str
    key_slice: int
    box: tuple[float, float, float, float] | None
    type: int = 0
    diameter_mm: float = 0.0
    slice_interval_mm: float | None = None

    @property
    def image_id(self) -> tuple[str, int]:
        return (self.volume_id, self.key_slice)


def read_annotations(path: str | os.PathLike) -> list[Annotation]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [f for f in FIELDS if f not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        for line, row in enumerate(reader, start=2):
            try:
                coords = [row[k] for k in ("x1", "y1", "x2", "y2")]
                box = None if all(c in ("", None) for c in coords) else tuple(float(c) for c in coords)
                if box is not None and not (box[2] > box[0] and box[3] > box[1]):
                    raise ValueError(f"degenerate box {box}")
                t = int(row["type"]) if row["type"] not in ("", None) else 0
                if not 0 <= t < len(LESION_TYPES):
                    raise ValueError(f"lesion type {t} outside [0, 8)")
                interval = row.get("slice_interval_mm")
                out.append(Annotation(
                    row["volume_id"],
                    int(row["key_slice"]),
                    box,
                    t,
                    float(row["diameter_mm"]) if row["diameter_mm"] not in ("", None) else 0.0,
                    float(interval) if interval not in ("", None) else None,
                ))
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{line}: {exc}") from exc
    return out


def write_annotations(path: str | os.PathLike, annotations) -> None:
    annotations = list(annotations)
    with_interval = any(a.slice_interval_mm is not None for a in annotations)
    fields = FIELDS + (["slice_interval_mm"] if with_interval else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for a in annotations:
            coords = ["", "", "", ""] if a.box is None else [_fmt(v) for v in a.box]
            row = [a.volume_id, a.key_slice, *coords, a.type, _fmt(a.diameter_mm)]
            if with_interval:
                row.append("" if a.slice_interval_mm is None else _fmt(a.slice_interval_mm))
            w.writerow(row)


def _fmt(v: float) -> str:
    return repr(float(v))
