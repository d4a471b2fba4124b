"""
Core package exposing the detector components.
"""

__all__ = [
    "anchors",
    "augment",
    "benchmark",
    "cli",
    "data_handler",
    "detnet",
    "dyhead",
    "errors",
    "evaluation",
    "gradcheck",
    "gradcheck_suite",
    "imageio",
    "labels",
    "layers",
    "loss",
    "metrics",
    "msfa",
    "optimizer",
    "persistence",
    "postprocess",
    "runner",
    "scenes",
    "tensor",
    "training",
    "utils",
]
