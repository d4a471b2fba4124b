"""
Model and run configuration helpers.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Dict, Tuple

Anchor = Tuple[float, float]

SUPPORTED_STRIDES = (8, 16)
UPSAMPLE_CHOICES = ("none", "nearest", "bilinear", "bicubic")
LR_SCHEDULES = ("constant", "cosine")


def _default_anchors() -> Tuple[Tuple[Anchor, ...], ...]:
    return (
        ((3.0, 3.0), (4.0, 4.0), (6.0, 6.0)),
        ((8.0, 8.0), (12.0, 12.0), (18.0, 18.0)),
    )


@dataclass
class ModelConfig:
    width: float = 0.25
    depth: int = 1
    base_channels: Tuple[int, ...] = (32, 64, 128, 256, 512)
    strides: Tuple[int, ...] = SUPPORTED_STRIDES
    anchors: Tuple[Tuple[Anchor, ...], ...] = field(default_factory=_default_anchors)
    num_classes: int = 1
    dyhead_blocks: int = 2
    dyhead_points: int = 9
    dyhead_reduction: int = 4
    msfa_dilations: Tuple[int, ...] = (1, 3, 5)
    use_msfa: bool = True
    neck_extra_conv: bool = True
    input_size: int = 256

    def validate(self) -> None:
        if tuple(self.strides) != SUPPORTED_STRIDES:
            raise ValueError(
                f"strides must be exactly {SUPPORTED_STRIDES} (the stride-32 head is removed), got {self.strides}"
            )
        if len(self.anchors) != len(self.strides):
            raise ValueError(f"{len(self.anchors)} anchor sets given for {len(self.strides)} scales")
        for scale, anchor_set in zip(self.strides, self.anchors):
            if len(anchor_set) != 3:
                raise ValueError(f"scale {scale} needs exactly 3 anchors, got {len(anchor_set)}")
            if any(w <= 0 or h <= 0 for w, h in anchor_set):
                raise ValueError(f"anchors at scale {scale} must be positive: {anchor_set}")
        if len(self.base_channels) != 5:
            raise ValueError(f"base_channels needs 5 stage widths, got {self.base_channels}")
        if self.width <= 0 or self.depth < 0:
            raise ValueError(f"invalid width={self.width} depth={self.depth}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be at least 1")
        if self.dyhead_blocks < 0:
            raise ValueError("dyhead_blocks must be non-negative")
        side = math.isqrt(max(self.dyhead_points, 0))
        if self.dyhead_points < 1 or side * side != self.dyhead_points or side % 2 == 0:
            raise ValueError(f"dyhead_points must be an odd square such as 9 or 25, got {self.dyhead_points}")
        if self.dyhead_reduction < 1:
            raise ValueError(f"dyhead_reduction must be at least 1, got {self.dyhead_reduction}")
        if not self.msfa_dilations or any(d < 1 for d in self.msfa_dilations):
            raise ValueError(f"invalid msfa dilations {self.msfa_dilations}")
        if self.input_size % 32:
            raise ValueError(f"input_size {self.input_size} must be divisible by 32")

    def channels(self, stage: int) -> int:
        return max(4, int(round(self.base_channels[stage] * self.width)))

    @property
    def outputs_per_anchor(self) -> int:
        return 5 + self.num_classes

    @property
    def anchors_per_scale(self) -> int:
        return len(self.anchors[0])


@dataclass
class RunConfig:
    subcommand: str = "train"
    config_path: Path | None = None
    seed: int = 0
    out_dir: Path = Path("runs")
    epochs: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    lr_schedule: str = "constant"
    conf_threshold: float = 0.15
    nms_iou: float = 0.45
    upsample: str = "none"
    threads: int | None = None

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError(f"invalid epochs={self.epochs} batch={self.batch_size}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.conf_threshold <= 1.0 or not 0.0 <= self.nms_iou <= 1.0:
            raise ValueError("thresholds must lie in [0, 1]")
        if self.upsample not in UPSAMPLE_CHOICES:
            raise ValueError(f"upsample must be one of {UPSAMPLE_CHOICES}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")


def _parse_bool(text: str) -> bool:
    return text.strip().lower() in {"1", "true", "yes", "on"}


def _parse_ints(text: str) -> Tuple[int, ...]:
    return tuple(int(part) for part in text.replace(",", " ").split())


def _parse_anchors(text: str) -> Tuple[Tuple[Anchor, ...], ...]:
    scales = []
    for chunk in text.split("|"):
        pairs = []
        for pair in chunk.split():
            w, h = pair.split(",")
            pairs.append((float(w), float(h)))
        scales.append(tuple(pairs))
    return tuple(scales)


def _format_anchors(anchors: Tuple[Tuple[Anchor, ...], ...]) -> str:
    return " | ".join(" ".join(f"{w:g},{h:g}" for w, h in scale) for scale in anchors)


_PARSERS: Dict[str, Callable[[str], Any]] = {
    "width": float,
    "depth": int,
    "base_channels": _parse_ints,
    "strides": _parse_ints,
    "anchors": _parse_anchors,
    "num_classes": int,
    "dyhead_blocks": int,
    "dyhead_points": int,
    "dyhead_reduction": int,
    "msfa_dilations": _parse_ints,
    "use_msfa": _parse_bool,
    "neck_extra_conv": _parse_bool,
    "input_size": int,
}


def parse_model_config(text: str) -> ModelConfig:
    """
    Parse flat ``key = value`` text. Unknown keys and malformed values raise ValueError.
    """
    values: Dict[str, Any] = {}
    for number, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ValueError(f"line {number}: expected 'key = value', got {raw_line!r}")
        if key not in _PARSERS:
            raise ValueError(f"line {number}: unknown model config key {key!r}")
        try:
            values[key] = _PARSERS[key](value.strip())
        except ValueError as exc:
            raise ValueError(f"line {number}: bad value for {key}: {exc}") from exc
    config = ModelConfig(**values)
    config.validate()
    return config


def format_model_config(config: ModelConfig) -> str:
    lines = []
    for item in fields(ModelConfig):
        value = getattr(config, item.name)
        if item.name == "anchors":
            text = _format_anchors(value)
        elif isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, tuple):
            text = ", ".join(str(v) for v in value)
        else:
            text = f"{value:g}" if isinstance(value, float) else str(value)
        lines.append(f"{item.name} = {text}")
    return "\n".join(lines) + "\n"


def model_config_from_dict(data: Dict[str, Any]) -> ModelConfig:
    values: Dict[str, Any] = {}
    for key, value in data.items():
        if key not in _PARSERS:
            raise ValueError(f"unknown model config key {key!r}")
        if key == "anchors":
            values[key] = tuple(tuple((float(w), float(h)) for w, h in scale) for scale in value)
        elif isinstance(value, list):
            values[key] = tuple(value)
        else:
            values[key] = value
    config = ModelConfig(**values)
    config.validate()
    return config


def model_config_to_dict(config: ModelConfig) -> Dict[str, Any]:
    return asdict(config)


def _load_file(path: Path) -> Dict[str, Any]:
    if not path.exists():
        return {}
    with path.open("r", encoding="utf-8") as file:
        return json.load(file)


def load_model_config(path: Path | None = None) -> ModelConfig:
    """
    Load a model config from flat key-value text, or JSON when the suffix is ``.json``.
    """
    if path is None:
        config = ModelConfig()
        config.validate()
        return config
    if path.suffix == ".json":
        return model_config_from_dict(_load_file(path))
    return parse_model_config(path.read_text(encoding="utf-8"))


def apply_env_overrides(run: RunConfig, seed_from_flag: bool = False) -> RunConfig:
    """
    Fill IRNET_SEED / IRNET_THREADS into the run config. An explicit --seed wins.
    """
    env_seed = os.getenv("IRNET_SEED")
    if env_seed is not None and not seed_from_flag:
        run.seed = int(env_seed)
    env_threads = os.getenv("IRNET_THREADS")
    if env_threads is not None:
        run.threads = int(env_threads)
    return run
