import numpy as np
import pytest

from core.data_handler import AnnotatedImage, Box
from core.errors import DataError
from upsamplers import UPSAMPLERS, get_upsampler, interpolation_matrix, upsample4x
from core.labels import format_yolo_txt, parse_yolo_txt
from upsamplers.classical import _cubic_weights, _linear_weights


def test_nearest_repeats_pixels():
    pixels = np.array([[0.0, 1.0]])
    out = get_upsampler("nearest").upsample(pixels, 4)
    assert out.shape == (4, 8)
    assert out[:, :4].max() == 0.0 and out[:, 4:].min() == 1.0


@pytest.mark.parametrize("weights", [_linear_weights, _cubic_weights])
def test_interpolation_rows_sum_to_one(weights):
    matrix = interpolation_matrix(7, 4, weights)
    assert matrix.shape == (28, 7)
    assert np.allclose(matrix.sum(axis=1), 1.0)


@pytest.mark.parametrize("method", sorted(UPSAMPLERS))
def test_constant_frames_stay_constant(method):
    out = get_upsampler(method).upsample(np.full((5, 6), 0.37), 4)
    assert out.shape == (20, 24)
    assert np.allclose(out, 0.37)


def test_bilinear_reproduces_interior_ramp():
    ramp = np.tile(np.linspace(0.0, 1.0, 9), (3, 1))
    out = get_upsampler("bilinear").upsample(ramp, 4)
    src = (np.arange(36) + 0.5) / 4 - 0.5
    interior = (src >= 0) & (src <= 8)
    assert np.allclose(out[1, interior], src[interior] / 8)


def test_bicubic_output_is_clipped():
    checker = np.indices((6, 6)).sum(axis=0) % 2 * 1.0
    out = get_upsampler("bicubic").upsample(checker, 4)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_upsample4x_scales_boxes():
    image = AnnotatedImage(np.zeros((8, 8)), [Box(0, 1, 2, 3, 4)], source_id="s")
    big = upsample4x(image, "bilinear")
    assert big.pixels.shape == (32, 32)
    assert big.scale_factor == 4
    assert big.boxes == [Box(0, 4, 8, 12, 16)]
    with pytest.raises(DataError):
        upsample4x(big)
    with pytest.raises(ValueError):
        upsample4x(image, "lanczos")


def linear_1d(values, factor):
    out = []
    for i in range(len(values) * factor):
        src = (i + 0.5) / factor - 0.5
        base = int(np.floor(src))
        t = src - base
        left = values[min(max(base, 0), len(values) - 1)]
        right = values[min(max(base + 1, 0), len(values) - 1)]
        out.append((1.0 - t) * left + t * right)
    return out


def test_bilinear_matches_two_one_dimensional_passes():
    pixels = np.random.default_rng(5).random((5, 7))
    rows_done = np.array([linear_1d(list(row), 4) for row in pixels])
    expected = np.array([linear_1d(list(column), 4) for column in rows_done.T]).T
    out = get_upsampler("bilinear").upsample(pixels, 4)
    assert out.shape == (20, 28)
    assert np.max(np.abs(out - expected)) <= 1e-9


def test_upscaled_boxes_survive_a_yolo_label_round_trip():
    rng = np.random.default_rng(8)
    width, height = 160, 128
    boxes = []
    for _ in range(200):
        x, y = rng.uniform(0, width - 10), rng.uniform(0, height - 10)
        w, h = rng.uniform(1, 10, 2)
        boxes.append(Box(int(rng.integers(0, 3)), x, y, x + w, y + h))
    image = upsample4x(AnnotatedImage(np.zeros((height, width)), boxes), "bilinear")
    parsed = parse_yolo_txt(format_yolo_txt(image.boxes, width * 4, height * 4), width * 4, height * 4)
    assert [b.class_id for b in parsed] == [b.class_id for b in image.boxes]
    for before, after in zip(image.boxes, parsed):
        assert np.max(np.abs(np.subtract(before.corners, after.corners))) < 0.51
