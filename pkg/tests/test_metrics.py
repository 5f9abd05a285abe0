import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lada.errors import NoGroundTruthError, SchemaError
from lada.metrics import (
    IOU_THRESHOLDS, Detection, average_precision, evaluate, iou, load_detections, save_detections,
)
from lada.protocol import BBox
from oracles import ap_oracle, corner_iou


def box(x0, y0, x1, y1, cls=0):
    return BBox.from_corners(cls, x0, y0, x1, y1)


def test_iou_examples():
    assert iou(box(0, 0, 2, 2), box(0, 0, 2, 2)) == 1.0
    assert iou(box(0, 0, 2, 2), box(5, 5, 6, 6)) == 0.0
    assert iou(box(0, 0, 2, 2), box(2, 0, 4, 2)) == 0.0
    assert iou(box(0, 0, 2, 2), box(1, 0, 3, 2)) == pytest.approx(1 / 3, abs=1e-15)


def test_detection_score_range():
    with pytest.raises(ValueError):
        Detection("a", box(0, 0, 1, 1), 1.5)


def test_ap_perfect_and_empty():
    gts = {"a": [box(0, 0, 10, 10)]}
    assert average_precision([Detection("a", box(0, 0, 10, 10), 0.7)], gts) == 1.0
    assert average_precision([], gts) == 0.0


def test_ap_false_then_true():
    gts = {"a": [box(0, 0, 10, 10)]}
    dets = [Detection("a", box(50, 50, 60, 60), 0.9), Detection("a", box(0, 0, 10, 10), 0.8)]
    expected = ap_oracle([("a", d.box.corners(), d.score) for d in dets],
                         {"a": [g.corners() for g in gts["a"]]}, 0.5)
    assert expected == pytest.approx(0.5, abs=1e-12)  # frozen: one TP at rank 2, precision 1/2
    assert average_precision(dets, gts) == pytest.approx(0.5, abs=1e-12)


def test_ap_without_ground_truth():
    with pytest.raises(NoGroundTruthError):
        average_precision([Detection("a", box(0, 0, 1, 1), 0.5)], {"a": []})
    with pytest.raises(NoGroundTruthError):
        evaluate([], {"a": []})


def test_false_positives_on_background_images_count():
    gts = {"fg": [box(0, 0, 10, 10)], "bg": []}
    clean = [Detection("fg", box(0, 0, 10, 10), 0.5)]
    noisy = clean + [Detection("bg", box(0, 0, 10, 10), 0.9)]
    assert average_precision(clean, gts) == 1.0
    assert average_precision(noisy, gts) < 1.0


def test_equal_iou_ties_take_first_ground_truth():
    # both ground truths overlap the detection equally; the first is taken, so
    # the second detection (matching only the second GT) is still a TP
    gts = {"a": [box(0, 0, 10, 10), box(5, 0, 15, 10)]}
    dets = [Detection("a", box(2.5, 0, 12.5, 10), 0.9), Detection("a", box(5, 0, 15, 10), 0.8)]
    assert average_precision(dets, gts, 0.5) == 1.0


def test_evaluate_perfect():
    gts = {"a": [box(0, 0, 10, 10)], "b": [box(3, 3, 9, 20, cls=1)], "c": []}
    dets = [Detection(k, b, 0.9) for k, v in gts.items() for b in v]
    report = evaluate(dets, gts)
    assert report.map_50_95 == 1.0 and report.map_50 == 1.0
    assert [t for t, _ in report.per_threshold_ap] == list(IOU_THRESHOLDS)


def test_evaluate_low_overlap():
    gts = {"a": [box(0, 0, 10, 10)]}
    report = evaluate([Detection("a", box(6, 0, 16, 10), 0.9)], gts)
    assert report.map_50 == 0.0 and report.map_50_95 == 0.0


def _random_instance(rng):
    images = ["i0", "i1"]
    gts = {k: [] for k in images}
    for _ in range(rng.randint(1, 3)):
        x, y = rng.uniform(0, 20), rng.uniform(0, 20)
        gts[rng.choice(images)].append(box(x, y, x + rng.uniform(2, 12), y + rng.uniform(2, 12)))
    dets = []
    for _ in range(rng.randint(0, 5)):
        k = rng.choice(images)
        if gts[k] and rng.random() < 0.7:
            g = rng.choice(gts[k]).corners()
            j = [c + rng.uniform(-2, 2) for c in g]
            x0, y0, x1, y1 = min(j[0], j[2] - 0.5), min(j[1], j[3] - 0.5), j[2], j[3]
        else:
            x0, y0 = rng.uniform(0, 20), rng.uniform(0, 20)
            x1, y1 = x0 + rng.uniform(1, 10), y0 + rng.uniform(1, 10)
        dets.append(Detection(k, box(x0, y0, x1, y1), round(rng.random(), 1)))
    return dets, gts


def test_evaluate_matches_oracle():
    rng = random.Random(5)
    for _ in range(200):
        dets, gts = _random_instance(rng)
        report = evaluate(dets, gts)
        raw_dets = [(d.image_id, d.box.corners(), d.score) for d in dets]
        raw_gts = {k: [g.corners() for g in v] for k, v in gts.items()}
        for thr, ap in report.per_threshold_ap:
            assert ap == pytest.approx(ap_oracle(raw_dets, raw_gts, thr), abs=1e-9)


def test_map_is_mean_of_thresholds():
    rng = random.Random(9)
    for _ in range(50):
        dets, gts = _random_instance(rng)
        r = evaluate(dets, gts)
        assert r.map_50_95 == sum(ap for _, ap in r.per_threshold_ap) / 10
        assert all(0.0 <= ap <= 1.0 for _, ap in r.per_threshold_ap)


def test_duplicate_of_a_matched_detection_is_a_false_positive():
    gts = {"a": [box(0, 0, 10, 10), box(20, 20, 30, 30)]}
    dets = [Detection("a", box(0, 0, 10, 10), 0.9), Detection("a", box(20, 20, 30, 30), 0.8)]
    assert average_precision(dets, gts) == 1.0
    # the copy takes the first ground truth, the original finds nothing left
    assert average_precision([dets[0]] + dets, gts) == pytest.approx((51 + 50 * 2 / 3) / 101, abs=1e-12)


def test_duplicating_top_correct_detection_with_single_ground_truth():
    gts = {"a": [box(0, 0, 10, 10)], "b": []}
    rng = random.Random(4)
    for _ in range(100):
        top = Detection("a", box(rng.uniform(0, 2), 0, 10, 10), 0.95)
        others = [Detection(rng.choice("ab"), box(*(lambda x: (x, x, x + 5, x + 5))(rng.uniform(0, 30))),
                            rng.uniform(0, 0.9)) for _ in range(rng.randint(0, 4))]
        dets = [top] + others
        assert average_precision([top] + dets, gts) == average_precision(dets, gts) == 1.0


def test_adding_top_scoring_hit_on_missed_ground_truth_never_hurts():
    rng = random.Random(2)
    checked = 0
    for _ in range(300):
        dets, gts = _random_instance(rng)
        for k, v in gts.items():
            for g in v:
                if any(d.image_id == k and iou(d.box, g) >= 0.5 for d in dets):
                    continue
                base = average_precision(dets, gts, 0.5)
                assert average_precision([Detection(k, g, 1.0)] + dets, gts, 0.5) >= base
                checked += 1
    assert checked > 50


@settings(max_examples=100)
@given(st.sampled_from([0.25, 0.5, 2.0, 4.0, 8.0]),
       st.lists(st.tuples(*[st.integers(0, 40)] * 2, *[st.integers(1, 20)] * 2), min_size=2, max_size=6))
def test_scale_invariance(k, raw):
    boxes = [box(x, y, x + w, y + h) for x, y, w, h in raw]
    for a in boxes:
        for b in boxes:
            assert iou(a.scaled(k), b.scaled(k)) == pytest.approx(iou(a, b), abs=1e-12)
    gts = {"a": boxes[:1]}
    dets = [Detection("a", b, 0.5 + 0.01 * i) for i, b in enumerate(boxes)]
    scaled_dets = [Detection("a", d.box.scaled(k), d.score) for d in dets]
    assert evaluate(scaled_dets, {"a": [boxes[0].scaled(k)]}).map_50_95 == pytest.approx(
        evaluate(dets, gts).map_50_95, abs=1e-12)


def test_iou_agrees_with_corner_oracle():
    rng = random.Random(1)
    for _ in range(500):
        a = box(*(lambda x, y: (x, y, x + rng.uniform(0.1, 9), y + rng.uniform(0.1, 9)))(
            rng.uniform(0, 10), rng.uniform(0, 10)))
        b = box(*(lambda x, y: (x, y, x + rng.uniform(0.1, 9), y + rng.uniform(0.1, 9)))(
            rng.uniform(0, 10), rng.uniform(0, 10)))
        assert iou(a, b) == pytest.approx(corner_iou(a.corners(), b.corners()), abs=1e-12)


def test_detections_round_trip(tmp_path):
    dets = [Detection("a", box(0, 0, 3, 4), 0.25), Detection("b", box(1, 1, 2, 2, cls=2), 1.0)]
    save_detections(dets, tmp_path / "d.jsonl")
    assert load_detections(tmp_path / "d.jsonl") == dets
    (tmp_path / "bad.jsonl").write_text('{"image_id": "a"}\n')
    with pytest.raises(SchemaError, match="line 1"):
        load_detections(tmp_path / "bad.jsonl")
