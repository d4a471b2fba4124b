import numpy as np
import pytest

from core.augment import (
    Brightness,
    HFlip,
    Noise,
    Scale,
    Translate,
    VFlip,
    augment,
    map_point_chain,
    random_augmentations,
)
from core.data_handler import AnnotatedImage, Box
from core.scenes import FWHM_TO_SIGMA, box_radius


def frame() -> AnnotatedImage:
    pixels = np.zeros((8, 10))
    pixels[2:5, 1:4] = 0.8
    return AnnotatedImage(pixels, [Box(0, 1, 2, 4, 5)], source_id="f")


def test_hflip_moves_pixels_and_boxes_together():
    out = HFlip().apply(frame())
    assert out.boxes == [Box(0, 6, 2, 9, 5)]
    rows, cols = np.nonzero(out.pixels)
    assert (cols.min(), cols.max() + 1) == (6, 9)
    twice = HFlip().apply(out)
    assert np.array_equal(twice.pixels, frame().pixels)
    assert twice.boxes == frame().boxes


def test_vflip():
    out = VFlip().apply(frame())
    assert out.boxes == [Box(0, 1, 3, 4, 6)]
    assert out.pixels[3:6, 1:4].min() == 0.8


def test_translate_fills_with_mean_and_drops_boxes_leaving_frame():
    image = frame()
    shifted = Translate(dy=1, dx=2).apply(image)
    assert shifted.boxes == [Box(0, 3, 3, 6, 6)]
    assert shifted.pixels[0, 0] == pytest.approx(image.pixels.mean())
    gone = Translate(dx=-6).apply(image)
    assert gone.boxes == []


def test_translate_clips_partial_boxes():
    out = Translate(dx=-2).apply(frame())
    assert out.boxes == [Box(0, 0, 2, 2, 5)]


def test_scale_about_centre():
    image = AnnotatedImage(np.zeros((8, 8)), [Box(0, 3, 3, 5, 5)])
    out = Scale(2.0).apply(image)
    assert out.boxes == [Box(0, 2, 2, 6, 6)]
    with pytest.raises(ValueError):
        Scale(0.0)


def test_photometric_ops_keep_boxes_and_range():
    image = frame()
    bright = Brightness(gain=2.0, offset=0.1).apply(image)
    assert bright.boxes == image.boxes
    assert bright.pixels.max() == 1.0 and bright.pixels[0, 0] == pytest.approx(0.1)
    noisy_a = Noise(0.05).apply(image, np.random.default_rng(1))
    noisy_b = Noise(0.05).apply(image, np.random.default_rng(1))
    assert np.array_equal(noisy_a.pixels, noisy_b.pixels)
    assert noisy_a.pixels.min() >= 0.0 and noisy_a.pixels.max() <= 1.0


def test_chain_and_point_mapping_agree():
    ops = [HFlip(), Translate(dy=1, dx=1)]
    out = augment(frame(), ops)
    y, x = map_point_chain(ops, 2, 1, (8, 10))
    assert (y, x) == (3, 10)
    assert out.boxes[0].x2 == 10 and out.boxes[0].y1 == 3


def test_unknown_op_is_rejected():
    class Blur:
        name = "blur"

        def apply(self, image, rng=None):
            return image

    with pytest.raises(ValueError):
        augment(frame(), [Blur()])


def test_random_chain_is_seeded():
    first = random_augmentations(np.random.default_rng(3))
    second = random_augmentations(np.random.default_rng(3))
    assert first == second
    for seed in range(20):
        for op in random_augmentations(np.random.default_rng(seed), (64, 64)):
            if isinstance(op, Translate):
                assert abs(op.dy) <= 6 and abs(op.dx) <= 6


def point_target(rng: np.random.Generator) -> AnnotatedImage:
    size = int(rng.integers(2, 7))
    cy, cx = (int(v) for v in rng.integers(16, 48, 2))
    yy, xx = np.mgrid[0:64, 0:64]
    sigma = size * FWHM_TO_SIGMA
    pixels = 0.5 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
    r = box_radius(size)
    return AnnotatedImage(pixels, [Box(0, cx - r, cy - r, cx + r + 1, cy + r + 1)], source_id="t")


@pytest.mark.parametrize("seed", range(100))
def test_augmented_box_still_encloses_the_brightest_pixel(seed):
    rng = np.random.default_rng(seed)
    image = point_target(rng)
    ops = [op for op in random_augmentations(rng, (64, 64)) if not isinstance(op, Noise)]
    out = augment(image, ops, rng)
    (box,) = out.boxes
    row, col = np.unravel_index(np.argmax(out.pixels), out.pixels.shape)
    assert box.x1 <= col + 0.5 <= box.x2
    assert box.y1 <= row + 0.5 <= box.y2
