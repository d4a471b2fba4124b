import math
from dataclasses import replace

import numpy as np
import pytest

from config.settings import ModelConfig
from core.detnet import Detector, analytic_parameter_count, build_model
from core.errors import ShapeError


def small_config(**overrides) -> ModelConfig:
    values = dict(width=0.125, depth=1, dyhead_blocks=1, input_size=64)
    values.update(overrides)
    return ModelConfig(**values)


def test_default_model_has_two_scales_with_expected_maps():
    model = build_model(ModelConfig(), seed=0)
    outputs = model.predict(np.zeros((1, 1, 256, 256), dtype=np.float32))
    assert len(outputs) == 2
    assert outputs[0].shape == (1, 18, 32, 32)
    assert outputs[1].shape == (1, 18, 16, 16)
    assert all(np.all(np.isfinite(out)) for out in outputs)
    assert ModelConfig().outputs_per_anchor == 6


def test_summary_lists_layers_without_stride32_head():
    model = Detector(small_config())
    summary = model.summary()
    names = [name for name, _ in summary.layers]
    assert summary.strides == (8, 16)
    assert "head.s8" in names and "head.s16" in names
    assert not any(name == "head.s32" for name in names)
    assert dict(summary.layers)["head.s8"] == (1, 18, 8, 8)
    assert summary.size_mb == pytest.approx(summary.parameters * 4 / 1e6)
    assert "parameters=" in summary.table()


@pytest.mark.parametrize(
    "overrides",
    [
        {},
        {"use_msfa": False},
        {"dyhead_blocks": 0},
        {"dyhead_blocks": 2, "dyhead_reduction": 8},
        {"neck_extra_conv": False},
        {"num_classes": 3, "depth": 2},
        {"width": 0.5, "msfa_dilations": (1, 2, 3, 4)},
    ],
)
def test_parameter_count_matches_closed_form(overrides):
    config = small_config(**overrides)
    assert Detector(config).parameter_count() == analytic_parameter_count(config)


def test_stride_32_configuration_is_rejected():
    with pytest.raises(ValueError):
        Detector(small_config(strides=(8, 16, 32), anchors=ModelConfig().anchors + (((20.0, 20.0),) * 3,)))


def test_non_divisible_input_names_required_padding():
    model = Detector(small_config())
    with pytest.raises(ShapeError) as excinfo:
        model.predict(np.zeros((1, 1, 70, 64), dtype=np.float32))
    assert "96x64" in str(excinfo.value)


def test_zero_heads_give_bias_only_maps():
    model = Detector(small_config())
    for head in model.heads:
        head.conv.weight.data[...] = 0.0
    outputs = model.predict(np.zeros((1, 1, 64, 64), dtype=np.float32))
    for out, head in zip(outputs, model.heads):
        expected = head.conv.bias.data[None, :, None, None]
        assert np.array_equal(out, np.broadcast_to(expected, out.shape))


def test_prior_biases():
    config = small_config()
    model = Detector(config)
    bias = model.heads[0].conv.bias.data.reshape(3, 6)
    assert bias[0, 4] == pytest.approx(math.log(8.0 / (64 / 8) ** 2), rel=1e-6)
    assert bias[0, 5] == pytest.approx(math.log(0.6 / 0.01), rel=1e-6)


def test_batch_rows_are_independent():
    model = Detector(small_config())
    rng = np.random.default_rng(0)
    a = rng.random((1, 1, 64, 64)).astype(np.float32)
    b = rng.random((1, 1, 64, 64)).astype(np.float32)
    duplicated = model.predict(np.concatenate([a, a]))
    assert all(np.allclose(out[0], out[1], atol=1e-5) for out in duplicated)
    forward = model.predict(np.concatenate([a, b]))
    swapped = model.predict(np.concatenate([b, a]))
    for f, s in zip(forward, swapped):
        assert np.allclose(f[0], s[1], atol=1e-4)
        assert np.allclose(f[1], s[0], atol=1e-4)


def test_backward_returns_a_gradient_per_parameter():
    model = Detector(small_config())
    x = np.random.default_rng(1).random((2, 1, 64, 64)).astype(np.float32)
    outputs, caches = model.forward(x)
    grad_x, grads = model.backward(caches, [np.ones_like(out) for out in outputs])
    assert grad_x.shape == x.shape
    params = model.parameters()
    assert set(grads) == set(params)
    assert all(grads[name].shape == params[name].shape for name in params)


def test_same_seed_same_weights():
    first = Detector(small_config(), seed=3).parameters()
    second = Detector(small_config(), seed=3).parameters()
    third = Detector(small_config(), seed=4).parameters()
    assert all(np.array_equal(first[name].data, second[name].data) for name in first)
    assert not all(np.array_equal(first[name].data, third[name].data) for name in first)


def test_ablation_switches_change_structure():
    plain = Detector(small_config(use_msfa=False, dyhead_blocks=0, neck_extra_conv=False))
    names = {name for name, _ in plain.named_modules()}
    assert "dyhead" not in names and "neck.extra" not in names
    assert not any(".msfa." in name for name in plain.parameters())
    full = Detector(replace(small_config(), dyhead_blocks=2))
    assert any(name.startswith("dyhead.block1.") for name in full.parameters())
    assert any("stage5.msfa." in name for name in full.parameters())
