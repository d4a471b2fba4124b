"""
Throughput of forward + decode + NMS on a single frame.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .detnet import Detector
from .postprocess import DEFAULT_CONF, DEFAULT_NMS_IOU, postprocess
from .utils import format_record

MIN_ITERATIONS = 10
DEFAULT_WARMUP = 5


@dataclass
class BenchmarkResult:
    input_size: Tuple[int, int]
    iterations: int
    warmup: int
    elapsed: float
    timings: List[float] = field(default_factory=list)

    @property
    def median_fps(self) -> float:
        return 1.0 / float(np.median(self.timings))

    @property
    def fps(self) -> float:
        return self.iterations / self.elapsed

    def record(self) -> str:
        return format_record(
            kind="bench",
            height=self.input_size[0],
            width=self.input_size[1],
            iterations=self.iterations,
            warmup=self.warmup,
            elapsed_s=self.elapsed,
            fps=self.fps,
            median_fps=self.median_fps,
        )


def fps_benchmark(
    model: Detector,
    input_size: Tuple[int, int] = (256, 256),
    iterations: int = 30,
    warmup: int = DEFAULT_WARMUP,
    conf_threshold: float = DEFAULT_CONF,
    iou_threshold: float = DEFAULT_NMS_IOU,
    seed: int = 0,
) -> BenchmarkResult:
    if iterations < MIN_ITERATIONS:
        raise ValueError(f"need at least {MIN_ITERATIONS} timed iterations, got {iterations}")
    h, w = input_size
    frame = np.random.default_rng(seed).random((1, 1, h, w)).astype(model.stem.conv.weight.data.dtype)

    def run() -> None:
        postprocess(model.predict(frame), model.config, conf_threshold, iou_threshold)

    for _ in range(warmup):
        run()
    timings: List[float] = []
    for _ in range(iterations):
        start = time.perf_counter()
        run()
        timings.append(time.perf_counter() - start)
    return BenchmarkResult(
        input_size=(h, w), iterations=iterations, warmup=warmup, elapsed=float(sum(timings)), timings=timings
    )
