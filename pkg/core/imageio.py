"""
Binary portable graymap (P5) I/O, box overlays and line charts rendered as graymaps.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence, Tuple

import numpy as np

from .errors import ImageFormatError

MAX_16BIT = 65535


def _header_tokens(data: bytes, count: int) -> Tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PGM header")
        tokens.append(data[start:pos])
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise ImageFormatError("PGM header must end with a single whitespace byte")
    return tokens, pos + 1


def parse_pgm(data: bytes) -> np.ndarray:
    """Decode P5 bytes to float64 values in [0, 1] (sample / maxval)."""
    tokens, offset = _header_tokens(data, 4)
    if tokens[0] != b"P5":
        raise ImageFormatError(f"not a binary graymap (magic {tokens[0][:8]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError(f"non-numeric PGM header field: {exc}") from exc
    if width < 1 or height < 1 or not 1 <= maxval <= MAX_16BIT:
        raise ImageFormatError(f"invalid PGM geometry {width}x{height} maxval={maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * dtype.itemsize
    payload = data[offset : offset + expected]
    if len(payload) != expected:
        raise ImageFormatError(f"PGM payload has {len(payload)} bytes, expected {expected}")
    samples = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    if samples.max(initial=0) > maxval:
        raise ImageFormatError(f"sample exceeds maxval {maxval}")
    return samples.astype(np.float64) / maxval


def format_pgm(pixels: np.ndarray, maxval: int = MAX_16BIT) -> bytes:
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 2:
        raise ImageFormatError(f"graymap needs a 2-D array, got {pixels.shape}")
    if not 1 <= maxval <= MAX_16BIT:
        raise ImageFormatError(f"maxval must lie in [1, {MAX_16BIT}], got {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    samples = np.rint(np.clip(pixels, 0.0, 1.0) * maxval).astype(dtype)
    height, width = pixels.shape
    return f"P5\n{width} {height}\n{maxval}\n".encode("ascii") + samples.tobytes()


def read_pgm(path: Path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ImageFormatError(f"cannot read image {path}: {exc}") from exc
    try:
        return parse_pgm(data)
    except ImageFormatError as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc


def write_pgm(path: Path, pixels: np.ndarray, maxval: int = MAX_16BIT) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(format_pgm(pixels, maxval))
    return path


def draw_boxes(
    pixels: np.ndarray, boxes: Sequence[Tuple[float, float, float, float]], value: float = 1.0
) -> np.ndarray:
    """Copy of ``pixels`` with one-pixel rectangle outlines burned in."""
    canvas = np.array(pixels, dtype=np.float64, copy=True)
    h, w = canvas.shape
    for x1, y1, x2, y2 in boxes:
        c0 = int(np.clip(np.floor(x1), 0, w - 1))
        r0 = int(np.clip(np.floor(y1), 0, h - 1))
        c1 = int(np.clip(np.ceil(x2) - 1, 0, w - 1))
        r1 = int(np.clip(np.ceil(y2) - 1, 0, h - 1))
        canvas[r0, c0 : c1 + 1] = value
        canvas[r1, c0 : c1 + 1] = value
        canvas[r0 : r1 + 1, c0] = value
        canvas[r0 : r1 + 1, c1] = value
    return canvas


def render_chart(series: Mapping[str, Sequence[float]], height: int = 160, width: int = 320) -> np.ndarray:
    """
    Line chart on a black canvas with a gray frame; series share the y range
    and are drawn at decreasing intensity.
    """
    canvas = np.zeros((height, width), dtype=np.float64)
    canvas[0, :] = canvas[-1, :] = canvas[:, 0] = canvas[:, -1] = 0.3
    finite = [np.asarray(v, dtype=np.float64) for v in series.values() if len(v)]
    finite = [v[np.isfinite(v)] for v in finite]
    values = np.concatenate(finite) if finite else np.zeros(0)
    if values.size == 0:
        return canvas
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo if hi > lo else 1.0
    margin = 4
    for rank, points in enumerate(series.values()):
        points = np.asarray(points, dtype=np.float64)
        if points.size == 0:
            continue
        level = max(0.4, 1.0 - 0.2 * rank)
        xs = np.linspace(margin, width - 1 - margin, num=max(points.size, 2))[: points.size]
        ys = (height - 1 - margin) - (points - lo) / span * (height - 1 - 2 * margin)
        if points.size == 1:
            canvas[int(round(ys[0])), int(round(xs[0]))] = level
            continue
        for (xa, ya), (xb, yb) in zip(zip(xs[:-1], ys[:-1]), zip(xs[1:], ys[1:])):
            if not (np.isfinite(ya) and np.isfinite(yb)):
                continue
            steps = int(max(abs(xb - xa), abs(yb - ya))) + 1
            rows = np.rint(np.linspace(ya, yb, steps + 1)).astype(int)
            cols = np.rint(np.linspace(xa, xb, steps + 1)).astype(int)
            canvas[np.clip(rows, 0, height - 1), np.clip(cols, 0, width - 1)] = level
    return canvas
