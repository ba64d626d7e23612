import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctx3d.ct.annotations import Annotation
from ctx3d.detection import Detection, iobb, iou
from ctx3d.evaluation import (
    FP_RATES,
    GroundTruthSet,
    format_sensitivity_table,
    format_stratified,
    froc_curve,
    match_detections,
    sensitivity_table,
    stratified_report,
    write_froc_csv,
    write_sensitivity_csv,
)
from ctx3d.evaluation.froc import diameter_bucket, interval_bucket


def gt_set(boxes_by_image, meta=None):
    anns = []
    for img, boxes in boxes_by_image.items():
        anns.append(Annotation(img[0], img[1], None))
        for b in boxes:
            anns.append(Annotation(img[0], img[1], tuple(b), **(meta or {})))
    return GroundTruthSet.from_annotations(anns)


def brute_force_match(dets, gts, criterion, thresh):
    """Enumerate every injective det->gt assignment and return the one consistent with greedy order."""
    ov_fn = iou if criterion == "iou" else (lambda g, d: iobb(g, d))
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    slots = [(img, j) for img in gts.images for j in range(len(gts.lesions[img]))]
    options = [[None] + [s for s in slots if s[0] == dets[i].image_id] for i in range(len(dets))]
    consistent = []
    for choice in itertools.product(*options):
        used = [c for c in choice if c is not None]
        if len(used) != len(set(used)):
            continue
        taken = set()
        ok = True
        for i in order:
            avail = [s for s in slots if s[0] == dets[i].image_id and s not in taken]
            ovs = [ov_fn(gts.lesions[s[0]][s[1]].box, dets[i].box) for s in avail]
            best = max(range(len(avail)), key=lambda q: (ovs[q], -q)) if avail else None
            want = avail[best] if best is not None and ovs[best] > thresh else None
            if choice[i] != want:
                ok = False
                break
            if want is not None:
                taken.add(want)
        if ok:
            consistent.append(choice)
    assert len(consistent) == 1
    return [c is not None for c in consistent[0]]


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------

def test_exact_detection_is_tp():
    gts = gt_set({("v", 0): [(0, 0, 10, 10)]})
    m = match_detections([Detection(("v", 0), (0, 0, 10, 10), 0.9)], gts)
    assert m.is_tp.tolist() == [True]


def test_duplicate_detection_is_fp():
    gts = gt_set({("v", 0): [(0, 0, 10, 10)]})
    dets = [Detection(("v", 0), (0, 0, 10, 10), 0.8), Detection(("v", 0), (0, 0, 10, 10), 0.9)]
    assert match_detections(dets, gts).is_tp.tolist() == [False, True]


def test_threshold_is_strict():
    gts = gt_set({("v", 0): [(0, 0, 10, 10)]})
    det = Detection(("v", 0), (0, 0, 10, 20), 0.9)          # iou exactly 0.5
    assert iou((0, 0, 10, 10), det.box) == 0.5
    assert match_detections([det], gts, "iou", 0.5).is_tp.tolist() == [False]


def test_wrong_image_never_matches():
    gts = gt_set({("v", 0): [(0, 0, 10, 10)], ("v", 1): []})
    assert match_detections([Detection(("v", 1), (0, 0, 10, 10), 0.9)], gts).is_tp.tolist() == [False]


def test_three_image_fixture_matches_oracle():
    gts = gt_set({
        ("a", 0): [(0, 0, 10, 10), (8, 0, 18, 10)],
        ("b", 0): [(0, 0, 20, 20)],
        ("c", 0): [(50, 50, 60, 60)],
    })
    dets = [
        Detection(("a", 0), (4, 0, 14, 10), 0.9),      # overlaps both a-gts
        Detection(("a", 0), (0, 0, 10, 10), 0.85),
        Detection(("a", 0), (8, 0, 18, 10), 0.85),
        Detection(("b", 0), (0, 0, 12, 12), 0.7),      # iou 0.36, iobb 1
        Detection(("c", 0), (51, 51, 61, 61), 0.6),
        Detection(("c", 0), (50, 50, 60, 60), 0.6),
    ]
    for crit in ("iou", "iobb"):
        got = match_detections(dets, gts, crit, 0.5).is_tp.tolist()
        assert got == brute_force_match(dets, gts, crit, 0.5)
    assert match_detections(dets, gts, "iou", 0.5).is_tp.tolist() == [False, True, True, False, True, False]


def test_matcher_equals_brute_force_on_random_fixtures():
    rng = np.random.default_rng(0)
    for _ in range(300):
        images = [("v", k) for k in range(int(rng.integers(1, 4)))]
        boxes = {img: [] for img in images}
        for _ in range(int(rng.integers(0, 5))):
            x, y = rng.integers(0, 20, 2)
            boxes[images[int(rng.integers(len(images)))]].append((x, y, x + rng.integers(4, 12), y + rng.integers(4, 12)))
        gts = gt_set(boxes)
        dets = []
        for _ in range(int(rng.integers(0, 7))):
            x, y = rng.integers(0, 20, 2)
            dets.append(Detection(images[int(rng.integers(len(images)))],
                                  (float(x), float(y), float(x + rng.integers(4, 12)), float(y + rng.integers(4, 12))),
                                  float(np.round(rng.random(), 1))))
        crit = ["iou", "iobb"][int(rng.integers(2))]
        th = float(rng.choice([0.1, 0.3, 0.5]))
        assert match_detections(dets, gts, crit, th).is_tp.tolist() == brute_force_match(dets, gts, crit, th)


def _contained_det(rng, g, score):
    x1 = rng.uniform(g[0], g[2] - 2)
    y1 = rng.uniform(g[1], g[3] - 2)
    return Detection(("v", 0), (x1, y1, rng.uniform(x1 + 1, g[2]), rng.uniform(y1 + 1, g[3])), score)


def test_iobb_tp_superset_one_det_per_gt():
    rng = np.random.default_rng(1)
    gt_boxes = [(0, 0, 30, 30), (40, 40, 60, 70), (80, 0, 90, 50)]
    gts = gt_set({("v", 0): gt_boxes})
    for _ in range(100):
        dets = [_contained_det(rng, g, float(rng.random())) for g in gt_boxes]
        a = match_detections(dets, gts, "iou", 0.5).is_tp
        b = match_detections(dets, gts, "iobb", 0.5).is_tp
        assert np.all(~a | b)


def test_iobb_matched_gts_superset():
    # with several dets per gt the TP flag can move to a higher-scoring det,
    # but every gt found under IoU is still found under IoBB
    rng = np.random.default_rng(2)
    gt_boxes = [(0, 0, 30, 30), (40, 40, 60, 70)]
    gts = gt_set({("v", 0): gt_boxes})
    for _ in range(100):
        dets = [_contained_det(rng, gt_boxes[int(rng.integers(2))], float(rng.random())) for _ in range(5)]
        a = match_detections(dets, gts, "iou", 0.5).gt_matched[("v", 0)]
        b = match_detections(dets, gts, "iobb", 0.5).gt_matched[("v", 0)]
        assert np.all(~a | b)


# ---------------------------------------------------------------------------
# FROC
# ---------------------------------------------------------------------------

@pytest.fixture
def two_image_fixture():
    """A: gts g1, g2; B: gt g3. Six detections with distinct scores."""
    gts = gt_set({("A", 0): [(0, 0, 10, 10), (20, 20, 30, 30)], ("B", 0): [(0, 0, 10, 10)]})
    dets = [
        Detection(("A", 0), (0, 0, 10, 10), 0.9),      # TP g1
        Detection(("B", 0), (40, 40, 50, 50), 0.8),    # FP
        Detection(("B", 0), (0, 0, 10, 10), 0.7),      # TP g3
        Detection(("A", 0), (0, 0, 10, 10), 0.6),      # FP, g1 already taken
        Detection(("A", 0), (20, 20, 30, 30), 0.5),    # TP g2
        Detection(("B", 0), (60, 60, 70, 70), 0.4),    # FP
    ]
    return dets, gts


def test_froc_hand_enumerated(two_image_fixture):
    dets, gts = two_image_fixture
    c = froc_curve(dets, gts)
    # cutoff: 0.9   0.8   0.7   0.6   0.5   0.4
    np.testing.assert_allclose(c.fp_per_image, [0, 0.5, 0.5, 1.0, 1.0, 1.5])
    np.testing.assert_allclose(c.sensitivity, [1 / 3, 1 / 3, 2 / 3, 2 / 3, 1.0, 1.0])
    np.testing.assert_allclose(c.thresholds, [0.9, 0.8, 0.7, 0.6, 0.5, 0.4])
    table = sensitivity_table(c)
    assert table[0.5] == pytest.approx(2 / 3)
    assert all(table[r] == 1.0 for r in (1, 2, 4, 8, 16))


def test_froc_tied_scores_collapse():
    gts = gt_set({("A", 0): [(0, 0, 10, 10)], ("B", 0): []})
    dets = [Detection(("B", 0), (0, 0, 5, 5), 0.5), Detection(("A", 0), (0, 0, 10, 10), 0.5)]
    c = froc_curve(dets, gts)
    np.testing.assert_allclose(c.fp_per_image, [0.5])
    np.testing.assert_allclose(c.sensitivity, [1.0])


def test_froc_perfect_and_all_fp():
    gts = gt_set({("A", 0): [(0, 0, 10, 10)], ("B", 0): [(5, 5, 15, 15)]})
    perfect = [Detection(("A", 0), (0, 0, 10, 10), 0.9), Detection(("B", 0), (5, 5, 15, 15), 0.8)]
    assert all(v == 1.0 for v in sensitivity_table(froc_curve(perfect, gts)).values())
    junk = [Detection(("A", 0), (50, 50, 60, 60), 0.9)]
    assert all(v == 0.0 for v in sensitivity_table(froc_curve(junk, gts)).values())


def test_froc_errors():
    with pytest.raises(ValueError):
        froc_curve([], gt_set({("A", 0): []}))
    with pytest.raises(ValueError, match="absent"):
        froc_curve([Detection(("Z", 0), (0, 0, 1, 1), 0.5)], gt_set({("A", 0): [(0, 0, 1, 1)]}))


def random_problem(rng, n_img=4, n_det=25):
    boxes = {("v", k): [tuple(float(q) for q in (x, y, x + 10, y + 10)) for x, y in rng.integers(0, 40, (int(rng.integers(0, 3)), 2))]
             for k in range(n_img)}
    if not any(boxes.values()):
        boxes[("v", 0)] = [(0.0, 0.0, 10.0, 10.0)]
    dets = []
    for _ in range(n_det):
        img = ("v", int(rng.integers(n_img)))
        x, y = rng.integers(0, 40, 2)
        dets.append(Detection(img, (float(x), float(y), float(x + 10), float(y + 10)), float(rng.random())))
    return dets, gt_set(boxes)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(0, 40))
def test_froc_monotone_and_bounded(seed, n_img, n_det):
    dets, gts = random_problem(np.random.default_rng(seed), n_img, n_det)
    if not dets:
        return
    c = froc_curve(dets, gts)
    assert np.all(np.diff(c.sensitivity) >= 0) and np.all(np.diff(c.fp_per_image) >= 0)
    vals = list(sensitivity_table(c).values())
    assert vals == sorted(vals) and 0 <= vals[0] and vals[-1] <= 1


def test_low_scoring_fp_never_hurts():
    rng = np.random.default_rng(3)
    for _ in range(30):
        dets, gts = random_problem(rng)
        before = sensitivity_table(froc_curve(dets, gts))
        extra = dets + [Detection(gts.images[0], (100, 100, 110, 110), -1.0)]
        after = sensitivity_table(froc_curve(extra, gts))
        assert all(after[r] >= before[r] for r in FP_RATES)


def test_duplicating_images_leaves_curve_unchanged():
    rng = np.random.default_rng(4)
    for _ in range(10):
        dets, gts = random_problem(rng)
        dup_gts = GroundTruthSet({**gts.lesions, **{(f"{v}_copy", k): a for (v, k), a in gts.lesions.items()}})
        dup_dets = dets + [Detection((f"{d.image_id[0]}_copy", d.image_id[1]), d.box, d.score) for d in dets]
        a = froc_curve(dets, gts)
        b = froc_curve(dup_dets, dup_gts)
        np.testing.assert_allclose(a.fp_per_image, b.fp_per_image)
        np.testing.assert_allclose(a.sensitivity, b.sensitivity)


# ---------------------------------------------------------------------------
# stratification and reports
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("d,bucket", [(5, "<10"), (9.99, "<10"), (10, "10~30"), (30, "10~30"), (30.5, ">30")])
def test_diameter_buckets(d, bucket):
    assert diameter_bucket(d) == bucket


@pytest.mark.parametrize("s,bucket", [(1.0, "<2.5"), (2.5, ">2.5"), (5.0, ">2.5"), (None, None)])
def test_interval_buckets(s, bucket):
    assert interval_bucket(s) == bucket


def test_stratified_single_stratum_equals_global(two_image_fixture):
    dets, gts = two_image_fixture
    for anns in gts.lesions.values():
        for i, a in enumerate(anns):
            anns[i] = Annotation(a.volume_id, a.key_slice, a.box, 0, 12.0, 1.0)
    rep = stratified_report(dets, gts, fp_rate=0.5)
    assert rep["type"] == {"LU": pytest.approx(2 / 3)}
    assert rep["diameter"] == {"10~30": pytest.approx(2 / 3)}


def test_stratified_two_types():
    anns = [Annotation("v", 0, (0, 0, 10, 10), 0, 5.0), Annotation("v", 0, (20, 20, 30, 30), 3, 5.0)]
    gts = GroundTruthSet.from_annotations(anns)
    rep = stratified_report([Detection(("v", 0), (0, 0, 10, 10), 0.9)], gts)
    assert rep["type"] == {"LU": 1.0, "ST": 0.0}
    assert "ME" not in rep["type"]            # empty strata are absent
    assert rep["interval"] == {}


def test_stratified_hand_computed_cutoff():
    # three diameter strata, global cutoff at 1 FP/image over 2 images
    anns = [
        Annotation("a", 0, (0, 0, 10, 10), 0, 5.0, 1.0),
        Annotation("a", 0, (20, 0, 30, 10), 1, 20.0, 1.0),
        Annotation("b", 0, (0, 0, 10, 10), 1, 40.0, 5.0),
        Annotation("b", 0, (20, 0, 30, 10), 2, 20.0, 5.0),
    ]
    gts = GroundTruthSet.from_annotations(anns)
    dets = [
        Detection(("a", 0), (0, 0, 10, 10), 0.9),      # TP <10
        Detection(("b", 0), (50, 50, 60, 60), 0.8),    # FP 1
        Detection(("b", 0), (0, 0, 10, 10), 0.7),      # TP >30
        Detection(("a", 0), (50, 50, 60, 60), 0.6),    # FP 2 -> fp/img 1.0
        Detection(("b", 0), (60, 60, 70, 70), 0.5),    # FP 3 -> beyond 1 FP/img
        Detection(("b", 0), (20, 0, 30, 10), 0.4),     # TP but below cutoff
    ]
    rep = stratified_report(dets, gts, fp_rate=1.0)
    assert rep["diameter"] == {"<10": 1.0, "10~30": 0.0, ">30": 1.0}
    assert rep["type"] == {"LU": 1.0, "ME": 0.5, "LV": 0.0}
    assert rep["interval"] == {"<2.5": 0.5, ">2.5": 0.5}


def test_sensitivity_table_format():
    row = dict(zip(FP_RATES, [0.4860, 0.6057, 0.7119, 0.7915, 0.8477, 0.8842]))
    text = format_sensitivity_table({"No 3D context": row})
    head, line = text.strip().splitlines()
    assert head.split()[:3] == ["FPs", "per", "image"]
    assert head.split()[3:] == ["0.5", "1", "2", "4", "8", "16"]
    assert line.split()[-6:] == ["48.60", "60.57", "71.19", "79.15", "84.77", "88.42"]


def test_report_csvs(tmp_path, two_image_fixture):
    dets, gts = two_image_fixture
    c = froc_curve(dets, gts)
    write_froc_csv(tmp_path / "froc.csv", c)
    lines = (tmp_path / "froc.csv").read_text().splitlines()
    assert lines[0] == "fp_per_image,sensitivity" and len(lines) == 7
    write_sensitivity_csv(tmp_path / "s.csv", {"m": sensitivity_table(c)})
    assert (tmp_path / "s.csv").read_text().splitlines()[1] == "m,66.67,100.00,100.00,100.00,100.00,100.00"


def test_stratified_format_columns():
    rep = {"3DCE": {"type": {"LU": 0.9, "BN": 0.5}, "diameter": {"<10": 0.8}, "interval": {">2.5": 0.7}}}
    text = format_stratified(rep)
    assert "Lesion type" in text and "Lesion diameter (mm)" in text and "Slice interval (mm)" in text
    assert text.splitlines()[-1].split() == ["3DCE", "90", "50", "80", "70"]
