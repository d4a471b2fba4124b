import numpy as np
import pytest

from core.data_handler import Box
from core.metrics import (
    DetectionMetrics,
    average_precision,
    eval_records,
    format_eval_table,
    map_range,
    match_detections,
)
from core.postprocess import Detection, iou


def gt(x1, y1, x2, y2, class_id=0):
    return Box(class_id, x1, y1, x2, y2)


def det(box, score, image="a", class_id=0):
    return Detection(box, score, class_id, image)


def test_perfect_detections_score_one():
    truths = {"a": [gt(0, 0, 10, 10)], "b": [gt(20, 20, 30, 30)]}
    dets = [det((0, 0, 10, 10), 0.9, "a"), det((20, 20, 30, 30), 0.8, "b")]
    result = map_range(dets, truths)
    assert result.precision == 1.0 and result.recall == 1.0
    assert result.map50 == pytest.approx(1.0)
    assert result.map50_95 == pytest.approx(1.0)


def test_false_positive_ranked_first_halves_ap():
    truths = {"a": [gt(0, 0, 10, 10)]}
    dets = [det((50, 50, 60, 60), 0.9), det((0, 0, 10, 10), 0.8)]
    assert average_precision(dets, truths) == pytest.approx(0.5)


def test_hand_computed_envelope():
    truths = {"a": [gt(0, 0, 10, 10), gt(20, 0, 30, 10)]}
    dets = [det((0, 0, 10, 10), 0.9), det((50, 50, 60, 60), 0.8), det((20, 0, 30, 10), 0.7)]
    # precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1
    assert average_precision(dets, truths) == pytest.approx(0.5 + 0.5 * 2 / 3)


def test_duplicate_detection_is_a_false_positive():
    truths = {"a": [gt(0, 0, 10, 10)]}
    dets = [det((0, 0, 10, 10), 0.9), det((0, 0, 10, 9), 0.8)]
    flags = match_detections(dets, truths, 0.5)
    assert flags.tolist() == [True, False]
    result = map_range(dets, truths)
    assert result.precision == 0.5
    assert result.per_image["a"].false_positives == 1
    assert result.per_image["a"].false_negatives == 0


def test_iou_ladder_counts_thresholds_up_to_overlap():
    truths = {"a": [gt(0, 0, 10, 10)]}
    result = map_range([det((0, 0, 10, 6), 0.9)], truths)
    assert result.map50 == pytest.approx(1.0)
    assert result.ap[0.6] == pytest.approx(1.0)
    assert result.ap[0.65] == 0.0
    assert result.map50_95 == pytest.approx(0.3)


def test_classes_must_agree():
    truths = {"a": [gt(0, 0, 10, 10, class_id=1)]}
    result = map_range([det((0, 0, 10, 10), 0.9, class_id=0)], truths)
    assert result.recall == 0.0
    assert result.per_class_ap == {1: 0.0}


def test_empty_inputs():
    assert average_precision([], {"a": []}) is None
    assert average_precision([], {"a": [gt(0, 0, 1, 1)]}) == 0.0
    result = map_range([], {})
    assert result.map50 is None and result.precision is None and result.recall is None


def test_operating_point_uses_confidence_threshold():
    truths = {"a": [gt(0, 0, 10, 10)]}
    result = map_range([det((0, 0, 10, 10), 0.1)], truths, conf_threshold=0.15)
    assert result.map50 == pytest.approx(1.0)
    assert result.precision is None
    assert result.recall == 0.0


def test_accumulator_and_reports():
    metrics = DetectionMetrics(conf_threshold=0.2)
    metrics.add_image("x", [det((0, 0, 4, 4), 0.7, "x")], [gt(0, 0, 4, 4)])
    metrics.add_image("y", [], [gt(5, 5, 9, 9)])
    result = metrics.result()
    assert result.num_ground_truths == 2 and result.num_detections == 1
    assert result.recall == 0.5
    assert result.per_image["y"].false_negatives == 1
    table = format_eval_table(result)
    assert "mAP@0.5:0.95" in table
    assert "recall" in table and "50.00" in table
    records = eval_records(result)
    assert records[0].startswith("kind=summary")
    assert sum(line.startswith("kind=ap ") for line in records) == 10
    assert any("kind=image image=y tp=0 fp=0 fn=1" == line for line in records)


def reference_ap(dets, truths, threshold):
    """All-points AP: each recall step weighted by the best precision at or beyond it."""
    total = sum(len(boxes) for boxes in truths.values())
    ranked = sorted(dets, key=lambda d: -d.score)
    used = {image: [False] * len(boxes) for image, boxes in truths.items()}
    hits = []
    for d in ranked:
        best, best_iou = None, threshold
        for j, box in enumerate(truths.get(d.image_id, [])):
            if used[d.image_id][j] or box.class_id != d.class_id:
                continue
            overlap = iou(d.box, box.corners)
            if overlap >= best_iou and (best is None or overlap > best_iou):
                best, best_iou = j, overlap
        if best is not None:
            used[d.image_id][best] = True
        hits.append(best is not None)
    precisions, tp = [], 0
    for rank, hit in enumerate(hits, start=1):
        tp += hit
        precisions.append(tp / rank)
    return sum(max(precisions[i:]) / total for i, hit in enumerate(hits) if hit)


def random_case(seed, classes=1):
    rng = np.random.default_rng(seed)
    truths, dets = {}, []
    for image in range(3):
        boxes = []
        for _ in range(rng.integers(0, 4)):
            x, y = rng.uniform(0, 40, 2)
            w, h = rng.uniform(3, 10, 2)
            class_id = int(rng.integers(0, classes)) if classes > 1 else 0
            boxes.append(gt(x, y, x + w, y + h, class_id))
        truths[image] = boxes
        for box in boxes:
            if rng.random() < 0.8:
                jitter = rng.normal(0, 1.0, 4)
                x1, y1, x2, y2 = np.array(box.corners) + jitter
                if x1 < x2 and y1 < y2:
                    dets.append(det((x1, y1, x2, y2), float(rng.random()), image, box.class_id))
        for _ in range(rng.integers(0, 3)):
            x, y = rng.uniform(0, 40, 2)
            class_id = int(rng.integers(0, classes)) if classes > 1 else 0
            dets.append(det((x, y, x + 5, y + 5), float(rng.random()), image, class_id))
    return truths, dets


@pytest.mark.parametrize("seed", range(100))
def test_evaluator_matches_independent_reference(seed):
    truths, dets = random_case(seed)
    total = sum(len(b) for b in truths.values())
    for threshold in (0.5, 0.75):
        got = average_precision(dets, truths, threshold)
        if total == 0:
            assert got is None
        else:
            assert got == pytest.approx(reference_ap(dets, truths, threshold), abs=1e-12)


def test_three_image_golden_case():
    truths = {
        "a": [gt(0, 0, 10, 10)],
        "b": [gt(0, 0, 10, 10), gt(20, 20, 30, 30)],
        "c": [gt(5, 5, 15, 15)],
    }
    dets = [
        det((0, 0, 10, 10), 0.95, "b"),
        det((40, 40, 50, 50), 0.9, "a"),
        det((5, 5, 15, 15), 0.8, "c"),
        det((0, 0, 10, 10), 0.7, "a"),
        det((0, 0, 10, 10), 0.6, "b"),
    ]
    assert match_detections(dets, truths, 0.5).tolist() == [True, False, True, True, False]
    # precision 1, 1/2, 2/3, 3/4, 3/5 at recall 1/4, 1/4, 1/2, 3/4, 3/4
    result = map_range(dets, truths)
    assert result.map50 == pytest.approx((1.0 + 0.75 + 0.75) / 4)
    assert result.map50_95 == pytest.approx(0.625)
    assert result.precision == pytest.approx(3 / 5)
    assert result.recall == pytest.approx(3 / 4)
    assert result.per_image["b"].false_positives == 1
    assert result.per_image["b"].false_negatives == 1


@pytest.mark.parametrize("classes", [1, 2])
@pytest.mark.parametrize("seed", range(100))
def test_ap_never_rises_with_the_iou_threshold(seed, classes):
    truths, dets = random_case(seed, classes)
    result = map_range(dets, truths)
    if result.map50 is None:
        assert all(ap is None for ap in result.ap.values())
        return
    ladder = [result.ap[t] for t in sorted(result.ap)]
    for looser, stricter in zip(ladder, ladder[1:]):
        assert stricter <= looser + 1e-12
    assert result.map50_95 <= result.map50 + 1e-12
