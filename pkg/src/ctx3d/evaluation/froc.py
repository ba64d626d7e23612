"""Detection matching and free-response ROC analysis."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from ..ct.annotations import Annotation
from ..detection.boxes import Detection, iobb_matrix, iou_matrix

FP_RATES = (0.5, 1.0, 2.0, 4.0, 8.0, 16.0)
CRITERIA = ("iou", "iobb")


@dataclass
class GroundTruthSet:
    """Lesions per image. Images without lesions are still listed (they count in FP rates)."""

    lesions: dict[tuple, list[Annotation]]

    @classmethod
    def from_annotations(cls, annotations) -> "GroundTruthSet":
        lesions: dict[tuple, list[Annotation]] = defaultdict(list)
        for a in annotations:
            lst = lesions[a.image_id]
            if a.box is not None:
                lst.append(a)
        return cls(dict(lesions))

    @property
    def images(self) -> list[tuple]:
        return sorted(self.lesions)

    @property
    def num_images(self) -> int:
        return len(self.lesions)

    @property
    def num_lesions(self) -> int:
        return sum(len(v) for v in self.lesions.values())

    def boxes(self, image_id) -> np.ndarray:
        return np.asarray([a.box for a in self.lesions.get(image_id, [])], dtype=np.float64).reshape(-1, 4)


def overlap(criterion: str, gt_boxes, det_box) -> np.ndarray:
    """Overlap of one detection against each gt box."""
    if criterion == "iou":
        return iou_matrix(gt_boxes, det_box)[:, 0]
    if criterion == "iobb":
        return iobb_matrix(gt_boxes, det_box)[:, 0]
    raise ValueError(f"unknown criterion {criterion!r}; expected one of {CRITERIA}")


@dataclass
class MatchResult:
    order: np.ndarray          # detection indices by descending score, ties in input order
    is_tp: np.ndarray          # per detection, input order
    matched_gt: np.ndarray     # gt position within its image, -1 for FP
    gt_matched: dict[tuple, np.ndarray]


def match_detections(dets: list[Detection], gts: GroundTruthSet, criterion: str = "iou",
                     threshold: float = 0.5) -> MatchResult:
    """Greedy matching: in score order, a detection claims its best-overlapping
    unmatched gt in the same image if the overlap is strictly above ``threshold``."""
    scores = np.asarray([d.score for d in dets], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    is_tp = np.zeros(len(dets), dtype=bool)
    matched_gt = np.full(len(dets), -1, dtype=np.int64)
    gt_matched = {img: np.zeros(len(v), dtype=bool) for img, v in gts.lesions.items()}
    gt_boxes = {img: gts.boxes(img) for img in gts.lesions}
    for i in order:
        d = dets[i]
        boxes = gt_boxes.get(d.image_id)
        if boxes is None or len(boxes) == 0:
            continue
        ov = overlap(criterion, boxes, np.asarray(d.box, dtype=np.float64))
        ov = np.where(gt_matched[d.image_id], -1.0, ov)
        j = int(np.argmax(ov))
        if ov[j] > threshold:
            is_tp[i] = True
            matched_gt[i] = j
            gt_matched[d.image_id][j] = True
    return MatchResult(order, is_tp, matched_gt, gt_matched)


@dataclass
class FrocCurve:
    """Operating points, one per distinct score cutoff, in order of decreasing cutoff."""

    fp_per_image: np.ndarray
    sensitivity: np.ndarray
    thresholds: np.ndarray

    def sensitivity_at(self, rate: float) -> float:
        ok = self.fp_per_image <= rate + 1e-12
        return float(self.sensitivity[ok].max()) if ok.any() else 0.0

    def cutoff_at(self, rate: float) -> float:
        """Lowest score cutoff whose FP rate stays within ``rate`` (inf if none)."""
        ok = self.fp_per_image <= rate + 1e-12
        return float(self.thresholds[ok].min()) if ok.any() else float("inf")

    def samples(self, rates=FP_RATES) -> dict[float, float]:
        return {r: self.sensitivity_at(r) for r in rates}


def froc_curve(dets: list[Detection], gts: GroundTruthSet, criterion: str = "iou",
               threshold: float = 0.5, match: MatchResult | None = None) -> FrocCurve:
    total = gts.num_lesions
    if total == 0:
        raise ValueError("FROC needs at least one ground-truth lesion")
    unknown = {d.image_id for d in dets} - set(gts.lesions)
    if unknown:
        raise ValueError(f"detections on images absent from the ground truth: {sorted(unknown)[:5]}")
    match = match or match_detections(dets, gts, criterion, threshold)
    if not dets:
        return FrocCurve(np.zeros(0), np.zeros(0), np.zeros(0))
    scores = np.asarray([d.score for d in dets], dtype=np.float64)[match.order]
    tp = np.cumsum(match.is_tp[match.order])
    fp = np.cumsum(~match.is_tp[match.order])
    # last index of each run of equal scores
    last = np.nonzero(np.append(scores[1:] != scores[:-1], True))[0]
    return FrocCurve(fp[last] / gts.num_images, tp[last] / total, scores[last])


def sensitivity_table(curve: FrocCurve, rates=FP_RATES) -> dict[float, float]:
    """Sensitivity (fraction) at each FP-per-image rate."""
    return curve.samples(rates)


DIAMETER_BUCKETS = (("<10", 0.0, 10.0), ("10~30", 10.0, 30.0), (">30", 30.0, float("inf")))
INTERVAL_BUCKETS = (("<2.5", 0.0, 2.5), (">2.5", 2.5, float("inf")))


def diameter_bucket(d: float) -> str:
    if d < 10:
        return "<10"
    return "10~30" if d <= 30 else ">30"


def interval_bucket(s: float | None) -> str | None:
    if s is None:
        return None
    return "<2.5" if s < 2.5 else ">2.5"


def stratified_report(dets: list[Detection], gts: GroundTruthSet, criterion: str = "iou",
                      threshold: float = 0.5, fp_rate: float = 4.0) -> dict[str, dict[str, float]]:
    """Per-stratum sensitivity at one global operating point.

    The score cutoff is the one reaching ``fp_rate`` on the whole set; each
    stratum then reports matched / total over its own lesions. Strata with
    no lesions are omitted.
    """
    from ..ct.annotations import LESION_TYPES

    match = match_detections(dets, gts, criterion, threshold)
    curve = froc_curve(dets, gts, criterion, threshold, match)
    cutoff = curve.cutoff_at(fp_rate)
    hit = {img: np.zeros(len(v), dtype=bool) for img, v in gts.lesions.items()}
    for i, d in enumerate(dets):
        if match.is_tp[i] and d.score >= cutoff:
            hit[d.image_id][match.matched_gt[i]] = True

    counts: dict[str, dict[str, list[int]]] = {"type": {}, "diameter": {}, "interval": {}}
    for img, lesions in gts.lesions.items():
        for j, a in enumerate(lesions):
            keys = {
                "type": LESION_TYPES[a.type],
                "diameter": diameter_bucket(a.diameter_mm),
                "interval": interval_bucket(a.slice_interval_mm),
            }
            for group, key in keys.items():
                if key is None:
                    continue
                c = counts[group].setdefault(key, [0, 0])
                c[0] += int(hit[img][j])
                c[1] += 1
    order = {
        "type": list(LESION_TYPES),
        "diameter": [b[0] for b in DIAMETER_BUCKETS],
        "interval": [b[0] for b in INTERVAL_BUCKETS],
    }
    return {g: {k: counts[g][k][0] / counts[g][k][1] for k in order[g] if k in counts[g]} for g in order}
