"""
Upsamplers package exposing the built-in x4 super-resolution stand-ins.
"""

from .classical import (
    UPSAMPLERS,
    BicubicUpsampler,
    BilinearUpsampler,
    NearestUpsampler,
    Upsampler,
    get_upsampler,
    interpolation_matrix,
    upsample4x,
)

__all__ = [
    "UPSAMPLERS",
    "BicubicUpsampler",
    "BilinearUpsampler",
    "NearestUpsampler",
    "Upsampler",
    "get_upsampler",
    "interpolation_matrix",
    "upsample4x",
]
