import numpy as np
import pytest

from core.errors import ImageFormatError
from core.imageio import draw_boxes, format_pgm, parse_pgm, read_pgm, render_chart, write_pgm


def test_eight_bit_graymap():
    data = b"P5\n3 2\n255\n" + bytes([0, 51, 255, 102, 153, 204])
    pixels = parse_pgm(data)
    assert pixels.shape == (2, 3)
    assert pixels[0, 1] == pytest.approx(0.2)
    assert pixels[0, 2] == 1.0


def test_sixteen_bit_is_big_endian():
    data = b"P5 2 1 65535\n" + bytes([0x01, 0x00, 0xFF, 0xFF])
    pixels = parse_pgm(data)
    assert pixels[0, 0] == pytest.approx(256 / 65535)
    assert pixels[0, 1] == 1.0


def test_header_comments_are_skipped():
    data = b"P5\n# from a sensor\n2 1\n# depth\n255\n" + bytes([10, 20])
    assert parse_pgm(data).tolist() == [[10 / 255, 20 / 255]]


@pytest.mark.parametrize(
    "data",
    [
        b"P2\n1 1\n255\n0",
        b"P5\n2 2\n255\n" + bytes(3),
        b"P5\n1 1\n100\n" + bytes([200]),
        b"P5\n0 1\n255\n",
        b"P5\n1",
    ],
)
def test_malformed_graymaps(data):
    with pytest.raises(ImageFormatError):
        parse_pgm(data)


def test_write_then_read(tmp_path):
    pixels = np.array([[0.0, 0.5], [0.25, 1.0]])
    path = write_pgm(tmp_path / "sub" / "frame.pgm", pixels)
    assert np.max(np.abs(read_pgm(path) - pixels)) <= 0.5 / 65535
    assert format_pgm(pixels, maxval=255).startswith(b"P5\n2 2\n255\n")
    with pytest.raises(ImageFormatError):
        read_pgm(tmp_path / "nope.pgm")


def test_draw_boxes_outlines_only():
    pixels = np.zeros((8, 8))
    canvas = draw_boxes(pixels, [(2, 2, 5, 5)], value=0.5)
    assert not pixels.any()
    assert canvas[2, 2:5].tolist() == [0.5, 0.5, 0.5]
    assert canvas[4, 2] == 0.5 and canvas[2, 4] == 0.5
    assert canvas[3, 3] == 0.0
    assert np.count_nonzero(canvas) == 8


def test_render_chart():
    empty = render_chart({})
    assert empty.shape == (160, 320)
    assert empty.max() == pytest.approx(0.3)
    chart = render_chart({"train": [3.0, 2.0, 1.0], "val": [2.5, 2.2]})
    assert (chart == 1.0).any()
    assert np.isclose(chart, 0.8).any()


def test_graymap_parser_only_raises_format_errors_on_corrupt_input():
    rng = np.random.default_rng(21)
    seeds = [
        format_pgm(rng.random((4, 5)), maxval=255),
        format_pgm(rng.random((3, 2))),
        b"P5\n# c\n2 2\n# d\n255\n" + bytes([1, 2, 3, 4]),
    ]
    for index in range(900):
        data = bytearray(seeds[index % len(seeds)])
        for _ in range(int(rng.integers(1, 5))):
            at = int(rng.integers(0, len(data) + 1))
            op = int(rng.integers(0, 4))
            if op == 0 and data:
                data[min(at, len(data) - 1)] = int(rng.integers(0, 256))
            elif op == 1:
                data[at:at] = bytes([int(rng.choice(list(b"0123456789 #\n-+P5")))])
            elif op == 2 and data:
                del data[at : at + int(rng.integers(1, 4))]
            else:
                data = data[:at]
        try:
            pixels = parse_pgm(bytes(data))
        except ImageFormatError:
            continue
        except Exception as exc:
            pytest.fail(f"{type(exc).__name__} on {bytes(data)!r}: {exc}")
        assert pixels.ndim == 2
        assert 0.0 <= pixels.min() and pixels.max() <= 1.0
