from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

import oracles
from compzsl.compspace import build_space, make_split
from compzsl.evalkit import (
    COCO_IOUS,
    ConfusionMatrix,
    Detection,
    EvalReport,
    average_precision,
    box_iou,
    class_agnostic_nms,
    confusion_matrix,
    harmonic_mean,
    harmonic_mean_n,
    load_detections,
    load_ground_truth,
    nms_map,
    save_detections,
)


def det(box, comp=0, score=0.9, img=0):
    return Detection(img, tuple(float(v) for v in box), comp, score)


# -- Detection / IoU ----------------------------------------------------------------

@pytest.mark.parametrize("box,score", [((0, 0, 0, 5), 0.5), ((0, 0, 5, -1), 0.5), ((0, 0, math.inf, 1), 0.5),
                                       ((0, 0, 1, 1), 1.5), ((0, 0, 1, 1), -0.1)])
def test_detection_validates(box, score):
    with pytest.raises(ValueError):
        Detection(0, box, 0, score)


def test_iou_hand_values():
    assert box_iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0
    assert box_iou((0, 0, 10, 10), (10, 0, 10, 10)) == 0.0
    assert box_iou((0, 0, 10, 10), (5, 0, 10, 10)) == pytest.approx(50 / 150)


box_st = st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(1, 12), st.integers(1, 12))


@given(box_st, box_st)
def test_iou_matches_oracle(a, b):
    assert box_iou(a, b) == pytest.approx(oracles.iou(a, b), abs=1e-12)
    assert 0.0 <= box_iou(a, b) <= 1.0


# -- NMS ----------------------------------------------------------------------------------

def test_identical_boxes_keep_highest_score():
    green, purple = det((10, 10, 20, 20), comp=3, score=0.9), det((10, 10, 20, 20), comp=4, score=0.8)
    assert class_agnostic_nms([purple, green]) == [green]


def test_disjoint_boxes_all_survive():
    ds = [det((i * 30, 0, 10, 10), score=0.5 + 0.1 * i) for i in range(4)]
    assert set(class_agnostic_nms(ds)) == set(ds)


def test_three_box_example():
    a = det((0, 0, 10, 10), score=0.9)
    b = det((2, 0, 10, 10), score=0.8)  # IoU 80/120 = 0.667 with A
    c = det((50, 50, 10, 10), score=0.7)
    assert box_iou(a.box, b.box) == pytest.approx(80 / 120)
    assert class_agnostic_nms([a, b, c]) == [a, c]


def test_tie_break_lower_composition_then_insertion():
    x = det((0, 0, 10, 10), comp=5, score=0.8)
    y = det((0, 0, 10, 10), comp=2, score=0.8)
    assert class_agnostic_nms([x, y]) == [y]
    z1, z2 = det((0, 0, 10, 10), comp=2, score=0.8), det((0, 0, 10, 10), comp=2, score=0.8)
    kept = class_agnostic_nms([z1, z2])
    assert len(kept) == 1 and kept[0] is z1


def test_nms_threshold_validated_and_empty_ok():
    assert class_agnostic_nms([]) == []
    for bad in (0.0, 1.5):
        with pytest.raises(ValueError):
            class_agnostic_nms([], bad)


dets_st = st.lists(st.tuples(box_st, st.integers(0, 3), st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.9])),
                   min_size=0, max_size=9)


@settings(max_examples=150)
@given(dets_st, st.sampled_from([0.3, 0.5, 0.7, 1.0]))
def test_nms_properties(raw, thr):
    ds = [det(b, c, s) for b, c, s in raw]
    kept = class_agnostic_nms(ds, thr)
    assert [id(k) for k in kept] == [id(ds[i]) for i in oracles.nms_oracle(raw, thr)]
    assert class_agnostic_nms(kept, thr) == kept
    assert all(any(k is d for d in ds) for k in kept)
    for i, a in enumerate(kept):
        for b in kept[i + 1:]:
            assert box_iou(a.box, b.box) < thr
    # each suppressed box overlaps a survivor of at least equal score
    for d in ds:
        if not any(d is k for k in kept):
            assert any(box_iou(d.box, k.box) >= thr and k.score >= d.score for k in kept)


# -- AP ----------------------------------------------------------------------------------

def test_perfect_predictions_are_100():
    gt = {0: [((0, 0, 10, 10), 0), ((20, 20, 10, 10), 0)]}
    ds = [det((0, 0, 10, 10)), det((20, 20, 10, 10), score=0.5)]
    assert average_precision(ds, gt, 0) == 100.0


def test_no_detections_is_zero_and_no_gt_is_none():
    gt = {0: [((0, 0, 10, 10), 0)]}
    assert average_precision([], gt, 0) == 0.0
    assert average_precision([det((0, 0, 10, 10), comp=1)], gt, 1) is None


def _inflated(correct_first: bool | None):
    # purple cylinder at left, green cylinder at right; both labels on both boxes
    purple, green = 0, 1
    left, right = (0, 0, 20, 20), (50, 0, 20, 20)
    gt = {0: [(left, purple), (right, green)]}
    if correct_first is None:
        ds = [det(left, green, 0.95), det(left, purple, 0.9), det(right, purple, 0.95), det(right, green, 0.9)]
    elif correct_first:
        ds = [det(left, purple, 0.95), det(left, green, 0.9), det(right, green, 0.95), det(right, purple, 0.9)]
    else:
        ds = [det(left, green, 0.95), det(left, purple, 0.9), det(right, purple, 0.95), det(right, green, 0.9)]
    return gt, ds


def _two_class_split():
    return make_split(build_space(["purple", "green"], ["cylinder"]), [0, 1])


def test_inflated_without_nms_is_fifty():
    gt, ds = _inflated(None)
    assert average_precision(ds, gt, 0) == 50.0
    assert average_precision(ds, gt, 1) == 50.0
    assert average_precision(ds, gt, 0) == pytest.approx(oracles.ap_oracle(
        [(0, d.box, d.score) for d in ds if d.composition == 0], [(0, b) for b, c in gt[0] if c == 0], COCO_IOUS))


@pytest.mark.parametrize("correct,want", [(True, 100.0), (False, 0.0)])
def test_inflated_with_nms(correct, want):
    gt, ds = _inflated(correct)
    rep = nms_map(ds, gt, _two_class_split())
    assert rep.mAP["overall"] == want
    assert rep.counts["after_nms"] == 2


def test_single_class_overall_matches_bucket():
    space = build_space(["red"], ["cube"])
    split = make_split(space, [0])
    gt = {0: [((0, 0, 10, 10), 0)]}
    rep = nms_map([det((0, 0, 10, 10))], gt, split)
    assert rep.mAP["overall"] == rep.mAP["seen"] == 100.0
    assert rep.mAP["unseen"] is None and rep.hm is None


def test_empty_ground_truth_errors():
    space = build_space(["red"], ["cube"])
    with pytest.raises(ValueError):
        nms_map([], {0: []}, make_split(space, [0]))


gt_layout = [(0, (0, 0, 10, 10)), (0, (30, 0, 10, 10)), (1, (0, 30, 10, 10)), (1, (30, 30, 10, 10)),
             (2, (15, 15, 10, 10))]


@st.composite
def ap_instance(draw):
    n_gt = draw(st.integers(1, len(gt_layout)))
    gts = gt_layout[:n_gt]
    dets = []
    for _ in range(draw(st.integers(0, 5))):
        img, box = draw(st.sampled_from(gt_layout))
        dx, dy = draw(st.integers(-4, 4)), draw(st.integers(-4, 4))
        score = draw(st.integers(1, 20)) / 20
        dets.append((img, (box[0] + dx, box[1] + dy, box[2], box[3]), score))
    return gts, dets


def _ap(gts, dets):
    gt = {}
    for img, box in gts:
        gt.setdefault(img, []).append((box, 0))
    return average_precision([det(b, 0, s, img) for img, b, s in dets], gt, 0)


@settings(max_examples=150)
@given(ap_instance())
def test_ap_matches_rank_oracle(inst):
    gts, dets = inst
    assert _ap(gts, dets) == pytest.approx(oracles.ap_oracle(dets, gts, COCO_IOUS), abs=1e-9)
    assert 0.0 <= _ap(gts, dets) <= 100.0


@settings(max_examples=100)
@given(ap_instance(), st.integers(1, 20))
def test_adding_exact_hit_on_unmatched_gt_never_lowers_ap(inst, s):
    gts, dets = inst
    # GT boxes are pairwise disjoint and det jitter stays below IoU 0.5 with other GT, so matches are local
    covered = {(img, b) for img, b in gts for di, db, _ in dets if di == img and oracles.iou(db, b) > 0}
    free = [g for g in gts if g not in covered]
    assume(free)
    img, box = free[0]
    assert _ap(gts, dets + [(img, box, s / 20)]) >= _ap(gts, dets) - 1e-9


@settings(max_examples=100)
@given(ap_instance(), st.integers(1, 20))
def test_removing_false_positive_never_lowers_ap(inst, s):
    gts, dets = inst
    fp = (9, (0, 0, 5, 5), s / 20)  # image 9 has no GT
    assert _ap(gts, dets) >= _ap(gts, dets + [fp]) - 1e-9


# -- harmonic means --------------------------------------------------------------------

def test_harmonic_examples():
    assert harmonic_mean(42.0, 42.0) == 42.0
    assert harmonic_mean(42.0, 0.0) == 0.0
    assert harmonic_mean(0.0, 0.0) == 0.0
    assert harmonic_mean(88.7, 70.6) == pytest.approx(78.62, abs=0.005)
    assert harmonic_mean_n(92.6, 93.7, 75.2) == pytest.approx(86.3, abs=0.05)
    with pytest.raises(ValueError):
        harmonic_mean(-1.0, 2.0)
    with pytest.raises(ValueError):
        harmonic_mean_n(1.0, -2.0, 3.0)


@given(st.floats(0, 100), st.floats(0, 100))
def test_harmonic_bounds(a, b):
    h = harmonic_mean(a, b)
    assert min(a, b) - 1e-9 <= h <= max(a, b) + 1e-9
    assert h <= math.sqrt(a * b) + 1e-9 <= (a + b) / 2 + 2e-9
    assert h == pytest.approx(oracles.harmonic(a, b), abs=1e-9)


@given(st.lists(st.floats(0.1, 100), min_size=1, max_size=5))
def test_harmonic_n_matches_oracle(vals):
    assert harmonic_mean_n(*vals) == pytest.approx(oracles.harmonic(*vals), rel=1e-12)


# -- report / confusion ----------------------------------------------------------------

def test_report_json_round_trip(split):
    space = split.space
    gt = {0: [((0, 0, 10, 10), space.parse("red cube"))], 1: [((5, 5, 10, 10), space.parse("red sphere"))]}
    ds = [det((0, 0, 10, 10), space.parse("red cube")), det((5, 5, 10, 10), space.parse("red sphere"), img=1)]
    rep = nms_map(ds, gt, split)
    back = EvalReport.from_dict(json.loads(rep.to_json()))
    assert back == rep
    assert rep.mAP["seen"] == rep.mAP["unseen"] == 100.0 and rep.hm == 100.0
    assert set(rep.roles["seen"]) | set(rep.roles["unseen"]) == set(space.names(range(18)))
    assert sum(v is None for v in rep.per_composition.values()) == 16


NAMES = ["green cube", "green cylinder", "purple cylinder"]


def test_confusion_examples():
    gt = {0: [((0, 0, 10, 10), 0), ((30, 0, 10, 10), 1)], 1: [((0, 0, 10, 10), 1), ((30, 0, 10, 10), 2)]}
    perfect = [det(b, c, 0.9, img) for img, anns in gt.items() for b, c in anns]
    cm = confusion_matrix(perfect, gt, NAMES)
    assert (cm.counts[:, :3] == np.diag([1, 2, 1])).all() and not cm.counts[:, 3].any()
    swapped = [det(b, 0 if c == 1 else c, 0.9, img) for img, anns in gt.items() for b, c in anns]
    cm = confusion_matrix(swapped, gt, NAMES)
    assert cm.counts[1].tolist() == [2, 0, 0, 0]
    cm = confusion_matrix([], gt, NAMES)
    assert cm.counts[:, 3].tolist() == [1, 2, 1] and cm.counts[:, :3].sum() == 0


def test_confusion_uses_top_scoring_match():
    gt = {0: [((0, 0, 10, 10), 1)]}
    ds = [det((0, 0, 10, 10), 2, 0.4), det((1, 0, 10, 10), 0, 0.8), det((40, 40, 5, 5), 1, 1.0)]
    assert confusion_matrix(ds, gt, NAMES).counts[1].tolist() == [1, 0, 0, 0]


@settings(max_examples=60)
@given(st.lists(st.tuples(st.integers(0, 2), box_st, st.integers(0, 2)), max_size=8),
       st.lists(st.tuples(st.integers(0, 2), box_st, st.integers(0, 2), st.integers(1, 10)), max_size=10))
def test_confusion_conserves_instances(gts, ds):
    gt = {}
    for img, b, c in gts:
        gt.setdefault(img, []).append((b, c))
    cm = confusion_matrix([det(b, c, s / 10, img) for img, b, c, s in ds], gt, NAMES)
    assert (cm.counts >= 0).all()
    assert cm.counts.sum() == len(gts)
    norm = cm.normalized()
    matched = cm.counts[:, :3].sum(axis=1)
    for i in range(3):
        assert norm[i].sum() == pytest.approx(1.0 if matched[i] else 0.0)


def test_confusion_csv_round_trip(tmp_path):
    cm = ConfusionMatrix(np.array([[3, 1, 0, 2], [0, 4, 1, 0], [0, 0, 5, 1]]), NAMES)
    path = tmp_path / "cm.csv"
    cm.write(path, comment="manifest abc")
    text = path.read_text()
    assert text.splitlines()[0] == "# manifest abc"
    assert text.splitlines()[1].endswith(",missed")
    back = ConfusionMatrix.read(path)
    assert back.names == NAMES and (back.counts == cm.counts).all()


def test_detection_json_round_trip(tmp_path):
    ds = [det((1.5, 2, 3, 4), 3, 0.25, 7), det((0, 0, 1, 1), 0, 1.0, 2)]
    path = tmp_path / "d.json"
    save_detections(ds, path)
    assert load_detections(path) == ds


def test_load_ground_truth_keeps_empty_images():
    coco = {"images": [{"id": 0}, {"id": 1}],
            "annotations": [{"image_id": 0, "bbox": [1, 2, 3, 4], "category_id": 5}]}
    assert load_ground_truth(coco) == {0: [((1, 2, 3, 4), 5)], 1: []}
