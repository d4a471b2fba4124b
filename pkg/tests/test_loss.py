import math

import numpy as np
import pytest

from config.settings import ModelConfig
from core.errors import ShapeError
from core.loss import LossWeights, bce_with_logits, build_targets, ciou, ciou_with_grad, compute_loss


def small_config(**overrides) -> ModelConfig:
    return ModelConfig(width=0.125, input_size=64, **overrides)


def zero_maps(batch: int = 2, classes: int = 1):
    channels = 3 * (5 + classes)
    return [np.zeros((batch, channels, 8, 8)), np.zeros((batch, channels, 4, 4))]


def test_no_targets_gives_ln2_objectness_per_cell():
    result = compute_loss(zero_maps(), [np.zeros((0, 5)), np.zeros((0, 5))], small_config())
    # balance 4 at stride 8, 1 at stride 16, scaled by batch
    assert result.obj == pytest.approx(2 * 5 * math.log(2.0))
    assert result.box == 0.0 and result.cls == 0.0
    assert result.matches == 0
    for grad in result.grads:
        view = grad.reshape(2, 3, 6, *grad.shape[2:])
        assert np.all(view[:, :, 4] > 0)
        assert not np.delete(view, 4, axis=2).any()


def test_objectness_gradient_scale():
    maps = zero_maps(batch=1)
    result = compute_loss(maps, [np.zeros((0, 5))], small_config())
    view = result.grads[0].reshape(1, 3, 6, 8, 8)
    assert view[0, 0, 4, 0, 0] == pytest.approx(0.5 * 4.0 / (3 * 8 * 8))


def test_ciou_of_identical_boxes_is_one():
    boxes = np.array([[3.0, 4.0, 2.0, 5.0], [0.5, 0.5, 1.0, 1.0]])
    assert np.allclose(ciou(boxes, boxes), 1.0, atol=1e-6)


def test_ciou_penalises_distance_and_aspect():
    target = np.array([[0.0, 0.0, 2.0, 2.0]])
    near = ciou(np.array([[0.5, 0.0, 2.0, 2.0]]), target)[0]
    far = ciou(np.array([[5.0, 0.0, 2.0, 2.0]]), target)[0]
    stretched = ciou(np.array([[0.0, 0.0, 4.0, 1.0]]), target)[0]
    assert 0.0 < near < 1.0
    assert far < 0.0
    assert stretched < 1.0 / 3.0


def test_ciou_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    pred = np.column_stack([rng.uniform(-1, 1, 6), rng.uniform(-1, 1, 6), rng.uniform(0.5, 2, 6), rng.uniform(0.5, 2, 6)])
    target = np.column_stack([rng.uniform(-1, 1, 6), rng.uniform(-1, 1, 6), rng.uniform(0.5, 2, 6), rng.uniform(0.5, 2, 6)])
    _, grad = ciou_with_grad(pred, target)
    h = 1e-6
    for j in range(4):
        up, down = pred.copy(), pred.copy()
        up[:, j] += h
        down[:, j] -= h
        numeric = (ciou(up, target) - ciou(down, target)) / (2 * h)
        assert np.allclose(grad[:, j], numeric, atol=1e-5)


def test_bce_is_stable_for_large_logits():
    values = bce_with_logits(np.array([-1000.0, 0.0, 1000.0]), np.array([0.0, 1.0, 1.0]))
    assert np.all(np.isfinite(values))
    assert values[1] == pytest.approx(math.log(2.0))
    assert values[0] == pytest.approx(0.0) and values[2] == pytest.approx(0.0)


def test_targets_use_own_cell_and_nearest_neighbours():
    # gx = 4.3 and gy = 4.7 on the stride-8 grid, size 0.5 cells
    target = np.array([[0, 4.3 / 8, 4.7 / 8, 0.5 / 8, 0.5 / 8]])
    assigned = build_targets([(8, 8), (4, 4)], [target], small_config())
    s8 = assigned[0]
    assert s8.count == 9
    assert set(zip(s8.gi.tolist(), s8.gj.tolist())) == {(4, 4), (3, 4), (4, 5)}
    assert set(s8.anchor.tolist()) == {0, 1, 2}
    # at stride 16 the largest anchor exceeds the 4x ratio
    assert set(assigned[1].anchor.tolist()) == {0, 1}


def test_zero_size_targets_are_ignored():
    assigned = build_targets([(8, 8), (4, 4)], [np.array([[0, 0.5, 0.5, 0.0, 0.1]])], small_config())
    assert all(scale.count == 0 for scale in assigned)


def test_matched_target_adds_box_term_and_hard_labels_are_one():
    maps = [np.full_like(m, -3.0) for m in zero_maps(batch=1)]
    target = np.array([[0, 4.3 / 8, 4.7 / 8, 0.5 / 8, 0.5 / 8]])
    soft = compute_loss(maps, [target], small_config())
    hard = compute_loss(maps, [target], small_config(), LossWeights(iou_ratio=0.0))
    assert soft.box > 0.0 and soft.matches > 0
    assert hard.box == pytest.approx(soft.box)
    assert hard.obj > soft.obj


def test_class_term_only_for_multiple_classes():
    target = np.array([[1, 0.5, 0.5, 0.08, 0.08]])
    single = compute_loss(zero_maps(batch=1), [np.array([[0, 0.5, 0.5, 0.08, 0.08]])], small_config())
    multi = compute_loss(zero_maps(batch=1, classes=3), [target], small_config(num_classes=3))
    assert single.cls == 0.0
    assert multi.cls > 0.0


def test_shape_errors():
    config = small_config()
    with pytest.raises(ShapeError):
        compute_loss(zero_maps()[:1], [np.zeros((0, 5))] * 2, config)
    with pytest.raises(ShapeError):
        compute_loss(zero_maps(), [np.zeros((0, 5))], config)
    with pytest.raises(ShapeError):
        compute_loss([np.zeros((2, 17, 8, 8)), np.zeros((2, 18, 4, 4))], [np.zeros((0, 5))] * 2, config)


def logit(p):
    return np.log(p / (1.0 - p))


def test_objectness_is_balance_weighted_mean_of_cell_bce_times_batch():
    rng = np.random.default_rng(3)
    maps = [rng.normal(0.0, 2.0, m.shape) for m in zero_maps(batch=3)]
    result = compute_loss(maps, [np.zeros((0, 5))] * 3, small_config())
    expected = 0.0
    for raw, balance in zip(maps, (4.0, 1.0)):
        obj = raw.reshape(3, 3, 6, *raw.shape[2:])[:, :, 4]
        cell_sum = float(np.sum(np.log1p(np.exp(obj))))
        cells_per_image = obj[0].size
        expected += balance * cell_sum / cells_per_image
    assert result.obj == pytest.approx(expected, rel=1e-9)


def test_logits_that_decode_onto_the_target_give_zero_box_loss():
    config = small_config()
    target = np.array([[0, 4.3 / 8, 4.7 / 8, 0.5 / 8, 0.5 / 8]])
    maps = zero_maps(batch=1)
    shapes = [m.shape[2:] for m in maps]
    for raw, scale in zip(maps, build_targets(shapes, [target], config)):
        assert scale.count > 0
        view = raw.reshape(1, 3, 6, *raw.shape[2:])
        txy = logit((scale.tbox[:, 0:2] + 0.5) / 2.0)
        twh = logit(np.sqrt(scale.tbox[:, 2:4] / scale.anchor_wh) / 2.0)
        for k in range(scale.count):
            view[scale.image[k], scale.anchor[k], 0:2, scale.gj[k], scale.gi[k]] = txy[k]
            view[scale.image[k], scale.anchor[k], 2:4, scale.gj[k], scale.gi[k]] = twh[k]
    result = compute_loss(maps, [target], config)
    assert result.matches == 9 + 6
    assert result.box == pytest.approx(0.0, abs=1e-6)
    for grad in result.grads:
        box_grads = grad.reshape(1, 3, 6, *grad.shape[2:])[:, :, 0:4]
        assert np.allclose(box_grads, 0.0, atol=1e-5)
