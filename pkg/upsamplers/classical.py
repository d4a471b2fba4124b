"""
Classical x4 upsamplers: nearest, bilinear and bicubic (Keys, a = -0.5).

Interpolating upsamplers use half-pixel centres, ``src = (dst + 0.5) / f - 0.5``,
with edge samples clamped, applied as separable row/column matrices.
"""

from __future__ import annotations

from typing import Callable, Dict, Protocol

import numpy as np

from core.data_handler import AnnotatedImage
from core.errors import DataError

SR_FACTOR = 4
CUBIC_A = -0.5


class Upsampler(Protocol):
    name: str

    def upsample(self, pixels: np.ndarray, factor: int) -> np.ndarray:
        ...


def _linear_weights(t: np.ndarray) -> Dict[int, np.ndarray]:
    return {0: 1.0 - t, 1: t}


def _cubic_weights(t: np.ndarray) -> Dict[int, np.ndarray]:
    a = CUBIC_A

    def kernel(d: np.ndarray) -> np.ndarray:
        d = np.abs(d)
        near = ((a + 2) * d - (a + 3)) * d * d + 1
        far = ((a * d - 5 * a) * d + 8 * a) * d - 4 * a
        return np.where(d <= 1, near, np.where(d < 2, far, 0.0))

    return {k: kernel(t - k) for k in (-1, 0, 1, 2)}


def interpolation_matrix(
    size: int, factor: int, weights: Callable[[np.ndarray], Dict[int, np.ndarray]]
) -> np.ndarray:
    """(size * factor, size) matrix mapping one axis of input samples to output samples."""
    out = size * factor
    src = (np.arange(out) + 0.5) / factor - 0.5
    base = np.floor(src).astype(int)
    t = src - base
    matrix = np.zeros((out, size), dtype=np.float64)
    rows = np.arange(out)
    for offset, w in weights(t).items():
        np.add.at(matrix, (rows, np.clip(base + offset, 0, size - 1)), w)
    return matrix


class NearestUpsampler:
    name = "nearest"

    def upsample(self, pixels: np.ndarray, factor: int) -> np.ndarray:
        return np.repeat(np.repeat(pixels, factor, axis=0), factor, axis=1)


class _SeparableUpsampler:
    name = "separable"
    weights: Callable[[np.ndarray], Dict[int, np.ndarray]]

    def upsample(self, pixels: np.ndarray, factor: int) -> np.ndarray:
        h, w = pixels.shape
        rows = interpolation_matrix(h, factor, type(self).weights)
        cols = interpolation_matrix(w, factor, type(self).weights)
        return np.clip(rows @ np.asarray(pixels, dtype=np.float64) @ cols.T, 0.0, 1.0)


class BilinearUpsampler(_SeparableUpsampler):
    name = "bilinear"
    weights = staticmethod(_linear_weights)


class BicubicUpsampler(_SeparableUpsampler):
    name = "bicubic"
    weights = staticmethod(_cubic_weights)


UPSAMPLERS: Dict[str, Upsampler] = {
    "nearest": NearestUpsampler(),
    "bilinear": BilinearUpsampler(),
    "bicubic": BicubicUpsampler(),
}


def get_upsampler(method: str) -> Upsampler:
    if method not in UPSAMPLERS:
        raise ValueError(f"Unknown upsample method {method!r}; choose from {sorted(UPSAMPLERS)}")
    return UPSAMPLERS[method]


def upsample4x(image: AnnotatedImage, method: str = "bicubic") -> AnnotatedImage:
    """Pixels and boxes scaled by 4; already-upscaled frames are rejected."""
    upsampler = get_upsampler(method)
    if image.scale_factor != 1:
        raise DataError(f"{image.source_id}: frame is already upscaled x{image.scale_factor}")
    return AnnotatedImage(
        pixels=upsampler.upsample(image.pixels, SR_FACTOR),
        boxes=[box.scaled(SR_FACTOR) for box in image.boxes],
        source_id=image.source_id,
        scale_factor=SR_FACTOR,
    )
