"""Detection CSV: ``volume_id,key_slice,x1,y1,x2,y2,score``, score-descending per image."""

from __future__ import annotations

import csv
import os

from .boxes import Detection

FIELDS = ["volume_id", "key_slice", "x1", "y1", "x2", "y2", "score"]


def write_detections(path: str | os.PathLike, detections) -> None:
    dets = sorted(enumerate(detections), key=lambda p: (p[1].image_id, -p[1].score, p[0]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FIELDS)
        for _, d in dets:
            vid, key = d.image_id
            w.writerow([vid, key, *(repr(float(v)) for v in d.box), repr(float(d.score))])


def read_detections(path: str | os.PathLike) -> list[Detection]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [f for f in FIELDS if f not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        for line, row in enumerate(reader, start=2):
            try:
                box = tuple(float(row[k]) for k in ("x1", "y1", "x2", "y2"))
                out.append(Detection((row["volume_id"], int(row["key_slice"])), box, float(row["score"])))
            except ValueError as exc:
                raise ValueError(f"{path}:{line}: {exc}") from exc
    return out
