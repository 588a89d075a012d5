import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pqaccel.errors import DataError, ValidationError
from pqaccel.metrics import (Box, ManualTag, average_precision, classify_errors, evaluate_dirs, iou,
                             match_detections, precision_recall_map, read_boxes, read_tags, write_boxes)


def pixel_iou(a, b):
    """Count unit pixels on an integer grid."""
    grid = np.zeros((2, 64, 64), dtype=bool)
    for k, box in enumerate((a, b)):
        grid[k, int(box.y_min):int(box.y_max), int(box.x_min):int(box.x_max)] = True
    inter = np.sum(grid[0] & grid[1])
    return inter / np.sum(grid[0] | grid[1])


def staircase_ap(flags, n_gt):
    """All-point AP with exact rationals: sum of recall steps times interpolated precision."""
    tp, precision, recall = 0, [], []
    for i, f in enumerate(flags, 1):
        tp += f
        precision.append(Fraction(tp, i))
        recall.append(Fraction(tp, n_gt))
    ap, prev = Fraction(0), Fraction(0)
    for i, r in enumerate(recall):
        if r > prev:
            ap += (r - prev) * max(precision[i:])
            prev = r
    return ap


def optimal_tp(preds, gts, thr=0.5):
    """Maximum number of TPs over all one-to-one assignments (brute force)."""
    best = 0
    for perm in itertools.permutations(range(len(gts) + len(preds)), len(preds)):
        tp = sum(1 for i, j in enumerate(perm) if j < len(gts) and preds[i].label == gts[j].label
                 and iou(preds[i], gts[j]) > thr)
        best = max(best, tp)
    return best


int_box = st.tuples(st.integers(0, 40), st.integers(0, 40), st.integers(1, 20), st.integers(1, 20)).map(
    lambda t: Box("car", t[0], t[1], t[0] + t[2], t[1] + t[3]))


def test_iou_fixtures():
    a = Box("car", 0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, Box("car", 20, 20, 30, 30)) == 0.0
    b = Box("car", 5, 5, 15, 15)
    assert pixel_iou(a, b) == pytest.approx(25 / 175, abs=1e-12)
    assert iou(a, b) == pytest.approx(0.142857, abs=1e-6)
    assert iou(a, b) == pytest.approx(25 / 175, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(a=int_box, b=int_box)
def test_iou_matches_pixel_grid_and_is_symmetric(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)
    assert v == pytest.approx(pixel_iou(a, b), abs=1e-12)
    assert (v == 1.0) == (a == b)


def test_box_validation():
    with pytest.raises(DataError):
        Box("car", 5, 0, 5, 10)
    with pytest.raises(DataError):
        Box("car", 0, 0, 1, 1, confidence=1.5)


def test_single_exact_match():
    g = Box("car", 0, 0, 10, 10)
    r = match_detections([Box("car", 0, 0, 10, 10, 0.9)], [g])
    assert (r.tp, r.fp, r.fn) == (1, 0, 0)


def test_duplicate_prediction_is_c():
    g = Box("car", 0, 0, 10, 10)
    r = match_detections([Box("car", 0, 0, 10, 10, 0.9), Box("car", 0, 0, 10, 10, 0.8)], [g])
    assert (r.tp, r.fp) == (1, 1)
    assert r.outcomes[1].category == "C"
    assert classify_errors([r]).counts["C"] == 1


def test_category_bands():
    g = Box("car", 0, 0, 10, 10)
    shifted = Box("car", 0, 0, 10, 10 * 0.3, 0.9)      # IOU 0.3, right class
    assert match_detections([shifted], [g]).outcomes[0].category == "B"
    assert match_detections([Box("car", 30, 30, 40, 40, 0.9)], [g]).outcomes[0].category == "D"
    assert match_detections([Box("person", 0, 0, 10, 10, 0.9)], [g]).outcomes[0].category == "G"
    r = match_detections([], [g])
    assert r.fn == 1 and classify_errors([r]).counts["F"] == 1


def test_hand_scene_matches_optimal_assignment():
    gts = [Box("car", 0, 0, 10, 10), Box("car", 20, 0, 30, 10), Box("person", 0, 20, 5, 35),
           Box("car", 40, 40, 50, 50)]
    preds = [Box("car", 1, 1, 11, 11, 0.95), Box("car", 0, 0, 10, 10, 0.9), Box("person", 0, 21, 5, 35, 0.8),
             Box("car", 22, 0, 32, 10, 0.7), Box("person", 40, 40, 50, 50, 0.6)]
    r = match_detections(preds, gts)
    assert r.tp == optimal_tp(preds, gts) == 3
    assert [o.category for o in r.outcomes if not o.tp] == ["C", "G"]


def random_scene(r):
    labels = ["car", "person"]
    gts = []
    for _ in range(r.integers(1, 4)):
        x, y, w, h = r.integers(0, 40, 2).tolist() + r.integers(5, 20, 2).tolist()
        gts.append(Box(labels[r.integers(2)], x, y, x + w, y + h))
    preds = []
    for _ in range(r.integers(0, 4)):
        if r.uniform() < 0.7:
            g = gts[r.integers(len(gts))]
            dx, dy = r.integers(-4, 5, 2)
            label = g.label if r.uniform() < 0.8 else labels[r.integers(2)]
            preds.append(Box(label, g.x_min + dx, g.y_min + dy, g.x_max + dx, g.y_max + dy,
                             round(float(r.uniform()), 3)))
        else:
            x, y = r.integers(0, 50, 2)
            preds.append(Box(labels[r.integers(2)], x, y, x + 8, y + 8, round(float(r.uniform()), 3)))
    return preds, gts


def test_greedy_matches_brute_force_on_random_scenes():
    agree = 0
    for seed in range(100):
        preds, gts = random_scene(np.random.default_rng(seed))
        r = match_detections(preds, gts)
        assert r.tp + r.fp == len(preds) and r.tp + r.fn == len(gts)
        agree += r.tp == optimal_tp(preds, gts)
    assert agree >= 95


def test_ap_staircase_fixture():
    flags = [True, False, True, False, True]
    oracle = staircase_ap(flags, 3)
    assert oracle == Fraction(34, 45)
    assert average_precision(flags, 3) == pytest.approx(float(oracle), abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(flags=st.lists(st.booleans(), max_size=12), extra=st.integers(0, 3))
def test_ap_matches_rational_oracle(flags, extra):
    n_gt = sum(flags) + extra
    if n_gt == 0:
        return
    assert average_precision(flags, n_gt) == pytest.approx(float(staircase_ap(flags, n_gt)), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(flags=st.lists(st.booleans(), min_size=1, max_size=12), extra=st.integers(1, 3))
def test_ap_monotone_under_confident_correct_detection(flags, extra):
    n_gt = sum(flags) + extra
    before = average_precision(flags, n_gt)
    assert average_precision([True] + flags, n_gt) >= before - 1e-12


def test_map_perfect_and_empty():
    gts = [Box("car", 0, 0, 10, 10), Box("person", 20, 20, 30, 30)]
    perfect = match_detections([Box(g.label, g.x_min, g.y_min, g.x_max, g.y_max, 0.9) for g in gts], gts)
    s = precision_recall_map([perfect])
    assert (s.precision, s.recall, s.mAP) == (1.0, 1.0, 1.0)
    empty = precision_recall_map([match_detections([], gts)])
    assert empty.recall == 0.0 and empty.mAP == 0.0
    assert empty.precision == 1.0 and not empty.precision_defined


def test_map_fixture_and_zero_gt_class():
    gts = [Box("car", 0, 0, 10, 10), Box("car", 20, 0, 30, 10), Box("car", 40, 0, 50, 10)]
    preds = [Box("car", 0, 0, 10, 10, 0.9), Box("car", 0, 30, 10, 40, 0.8), Box("car", 20, 0, 30, 10, 0.7),
             Box("car", 0, 50, 10, 60, 0.6), Box("car", 40, 0, 50, 10, 0.5), Box("bus", 0, 0, 9, 9, 0.4)]
    s = precision_recall_map([match_detections(preds, gts)])
    assert s.ap["car"] == pytest.approx(34 / 45)
    assert "bus" not in s.ap and s.mAP == pytest.approx(34 / 45)
    assert any("bus" in w for w in s.warnings)


def test_confidence_ties_keep_input_order():
    gts = [Box("car", 0, 0, 10, 10)]
    preds = [Box("car", 30, 30, 40, 40, 0.5), Box("car", 0, 0, 10, 10, 0.5)]
    s = precision_recall_map([match_detections(preds, gts)])
    assert s.ap["car"] == pytest.approx(0.5)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_taxonomy_partitions_errors(seed):
    preds, gts = random_scene(np.random.default_rng(seed))
    r = match_detections(preds, gts)
    b = classify_errors([r])
    c = b.counts
    assert c["B"] + c["C"] + c["D"] + c["G"] == r.fp
    assert c["E"] + c["F"] == r.fn
    assert c["A"] == 0 and c["E"] == 0


def test_manual_tags_override_and_validate():
    gts = [Box("car", 0, 0, 10, 10), Box("car", 50, 50, 60, 60)]
    preds = [Box("car", 0, 0, 10, 10, 0.9), Box("car", 30, 30, 35, 35, 0.8)]
    r = match_detections(preds, gts, image_id="img")
    tags = [ManualTag("img", "pred", 1, "A"), ManualTag("img", "gt", 1, "E"), ManualTag("img", "scene", -1, "messy")]
    b = classify_errors([r], tags)
    assert b.counts["A"] == 1 and b.counts["D"] == 0
    assert b.counts["E"] == 1 and b.counts["F"] == 0
    assert b.source("A") == "manual" and b.source("F") == "auto"
    assert b.scenes["messy"]["A"] == 1
    assert b.found_share == pytest.approx(0.5)
    with pytest.raises(ValidationError):
        classify_errors([r], [ManualTag("img", "pred", 0, "A")])
    with pytest.raises(ValidationError):
        classify_errors([r], [ManualTag("img", "gt", 0, "E")])
    with pytest.raises(ValidationError):
        classify_errors([r], [ManualTag("img", "pred", 1, "B")])


def test_text_round_trip(tmp_path):
    boxes = [Box("car", 1, 2, 30.5, 40, 0.75), Box("person", 3, 4, 5, 6)]
    write_boxes(tmp_path / "a.txt", boxes)
    assert read_boxes(tmp_path / "a.txt") == boxes
    (tmp_path / "bad.txt").write_text("car 1 2 3\n")
    with pytest.raises(DataError, match="bad.txt:1"):
        read_boxes(tmp_path / "bad.txt")


def test_evaluate_dirs(tmp_path):
    (tmp_path / "gt").mkdir()
    (tmp_path / "pred").mkdir()
    write_boxes(tmp_path / "gt" / "0001.txt", [Box("car", 0, 0, 10, 10)])
    write_boxes(tmp_path / "pred" / "0001.txt", [Box("car", 0, 0, 10, 10, 0.9), Box("car", 40, 40, 45, 45, 0.3)])
    (tmp_path / "tags.txt").write_text("# manual audit\n0001 pred 1 A\n0001 scene - clear\n")
    assert len(read_tags(tmp_path / "tags.txt")) == 2
    results, summary, breakdown = evaluate_dirs(tmp_path / "pred", tmp_path / "gt", tmp_path / "tags.txt")
    assert summary.tp == 1 and summary.fp == 1 and breakdown.counts["A"] == 1
    with pytest.raises(DataError):
        evaluate_dirs(tmp_path / "pred", tmp_path / "gt", tmp_path / "missing.txt")
