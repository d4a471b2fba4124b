import math

import numpy as np
import pytest

from config.settings import ModelConfig
from core.postprocess import Detection, decode, decode_arrays, iou, iou_matrix, nms, postprocess


def greedy_reference(dets, threshold):
    remaining = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    kept = []
    for i in remaining:
        if all(dets[k].class_id != dets[i].class_id or iou(dets[k].box, dets[i].box) <= threshold for k in kept):
            kept.append(i)
    return [dets[i] for i in kept]


def random_detections(seed, count=200, classes=1):
    rng = np.random.default_rng(seed)
    dets = []
    for _ in range(count):
        x, y = rng.uniform(0, 50, 2)
        w, h = rng.uniform(2, 15, 2)
        dets.append(Detection((x, y, x + w, y + h), float(rng.random()), int(rng.integers(classes))))
    return dets


def test_zero_map_decodes_to_anchor_boxes_at_cell_centres():
    raw = np.zeros((1, 18, 2, 3))
    boxes, scores, classes = decode_arrays(raw, 8, [(3.0, 3.0), (4.0, 4.0), (6.0, 6.0)], 1)
    assert boxes.shape == (1, 18, 4)
    assert np.allclose(scores, 0.5)
    assert not classes.any()
    # anchor 0, row 1, column 2
    assert np.allclose(boxes[0, 5], [18.5, 10.5, 21.5, 13.5])
    # anchor 2, row 0, column 0
    assert np.allclose(boxes[0, 12], [1.0, 1.0, 7.0, 7.0])


def test_confidence_filter_is_inclusive():
    config = ModelConfig()
    maps = [np.zeros((1, 18, 4, 4)), np.zeros((1, 18, 2, 2))]
    assert sum(len(d) for d in decode(maps, config, conf_threshold=0.5)) == 3 * 16 + 3 * 4
    assert decode(maps, config, conf_threshold=0.51) == [[]]
    with pytest.raises(ValueError):
        decode(maps, config, conf_threshold=1.5)


def test_multiclass_score_is_objectness_times_class():
    config = ModelConfig(num_classes=2)
    raw = np.full((1, 21, 1, 1), -20.0)
    raw[0, 0:5] = 0.0
    raw[0, 6] = 10.0
    maps = [raw, np.full((1, 21, 1, 1), -20.0)]
    dets = decode(maps, config, conf_threshold=0.1, image_ids=["frame"])[0]
    assert len(dets) == 1
    assert dets[0].class_id == 1
    assert dets[0].image_id == "frame"
    assert dets[0].score == pytest.approx(0.5 * (1 / (1 + np.exp(-10.0))))


def test_iou_values():
    assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7)
    assert iou((0, 0, 1, 1), (1, 0, 2, 1)) == 0.0
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    matrix = iou_matrix(np.array([[0, 0, 2, 2]]), np.array([[1, 1, 3, 3], [5, 5, 6, 6]]))
    assert matrix.shape == (1, 2)
    assert matrix[0, 0] == pytest.approx(1 / 7) and matrix[0, 1] == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_nms_matches_greedy_reference(seed):
    dets = random_detections(seed, classes=2)
    assert nms(dets, 0.3) == greedy_reference(dets, 0.3)


def test_nms_keeps_first_of_equal_scores():
    a = Detection((0, 0, 10, 10), 0.9)
    b = Detection((1, 1, 10, 10), 0.9)
    assert nms([a, b], 0.5) == [a]
    assert nms([b, a], 0.5) == [b]


def test_nms_class_awareness():
    a = Detection((0, 0, 10, 10), 0.9, class_id=0)
    b = Detection((0, 0, 10, 10), 0.8, class_id=1)
    assert nms([a, b], 0.5) == [a, b]
    assert nms([a, b], 0.5, class_agnostic=True) == [a]


def test_nms_output_bounds():
    dets = random_detections(9, count=60)
    kept = nms(dets, 0.5, max_det=5)
    assert len(kept) == 5
    assert [d.score for d in kept] == sorted((d.score for d in kept), reverse=True)
    assert nms([], 0.5) == []
    with pytest.raises(ValueError):
        nms(dets, -0.1)


def test_detection_validation():
    with pytest.raises(ValueError):
        Detection((5, 0, 5, 3), 0.5)
    with pytest.raises(ValueError):
        Detection((0, 0, 1, 1), 1.5)


def test_postprocess_suppresses_duplicate_predictions():
    config = ModelConfig()
    raw = np.full((1, 18, 4, 4), -10.0)
    for anchor in range(3):
        raw[0, anchor * 6 : anchor * 6 + 4, 2, 2] = 0.0
        raw[0, anchor * 6 + 4, 2, 2] = 5.0
    maps = [raw, np.full((1, 18, 2, 2), -10.0)]
    dets = postprocess(maps, config, conf_threshold=0.5, iou_threshold=0.2)[0]
    assert len(dets) == 1
    assert dets[0].box[0] < 20.0 < dets[0].box[2]


def scalar_decode(raw, stride, anchors, threshold):
    """Per-cell decode written with plain floats."""
    found = []
    _, channels, h, w = raw.shape
    per_anchor = channels // len(anchors)
    for a, (aw, ah) in enumerate(anchors):
        for row in range(h):
            for col in range(w):
                s = [1.0 / (1.0 + math.exp(-float(raw[0, a * per_anchor + k, row, col]))) for k in range(per_anchor)]
                if s[4] < threshold:
                    continue
                cx = (2 * s[0] - 0.5 + col) * stride
                cy = (2 * s[1] - 0.5 + row) * stride
                bw = (2 * s[2]) ** 2 * aw
                bh = (2 * s[3]) ** 2 * ah
                found.append(Detection((cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2), s[4]))
    return found


@pytest.mark.parametrize("seed", range(50))
def test_pipeline_matches_scalar_reference(seed):
    config = ModelConfig()
    rng = np.random.default_rng(seed)
    maps = [2.0 * rng.standard_normal((1, 18, 4, 4)), 2.0 * rng.standard_normal((1, 18, 2, 2))]
    expected = []
    for raw, stride, anchors in zip(maps, config.strides, config.anchors):
        expected.extend(scalar_decode(raw, stride, anchors, 0.15))
    expected = greedy_reference(expected, 0.45)
    got = postprocess(maps, config, conf_threshold=0.15, iou_threshold=0.45)[0]
    assert len(got) == len(expected)
    for a, b in zip(got, expected):
        assert a.score == pytest.approx(b.score, abs=1e-12)
        assert np.allclose(a.box, b.box, atol=1e-9)


@pytest.mark.parametrize("class_agnostic", [False, True])
@pytest.mark.parametrize("seed", range(50))
def test_nms_is_idempotent(seed, class_agnostic):
    dets = random_detections(seed, classes=3)
    once = nms(dets, 0.45, class_agnostic=class_agnostic)
    assert nms(once, 0.45, class_agnostic=class_agnostic) == once
