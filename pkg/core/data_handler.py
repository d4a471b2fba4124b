"""
Data handling utilities for annotated infrared frames: records, providers,
manifests, dataset splits and batch collation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Protocol, Sequence, Tuple, TypeVar

import numpy as np

from .errors import DataError
from .tensor import get_dtype
from .utils import configure_logger

logger = configure_logger("data_handler")

BATCH_DIVISOR = 32
T = TypeVar("T")


@dataclass(slots=True)
class Box:
    """Pixel box, 0-based half-open [x1, x2) x [y1, y2)."""

    class_id: int
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        if not all(np.isfinite(v) for v in (self.x1, self.y1, self.x2, self.y2)):
            raise DataError(f"box coordinates must be finite: {self.corners}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise DataError(f"box must satisfy x1<x2 and y1<y2, got {self.corners}")
        if self.class_id < 0:
            raise DataError(f"class id must be non-negative, got {self.class_id}")

    @property
    def corners(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def scaled(self, factor: float) -> "Box":
        return Box(self.class_id, self.x1 * factor, self.y1 * factor, self.x2 * factor, self.y2 * factor)

    def contains(self, y: float, x: float) -> bool:
        return self.x1 <= x < self.x2 and self.y1 <= y < self.y2


@dataclass
class AnnotatedImage:
    pixels: np.ndarray
    boxes: List[Box] = field(default_factory=list)
    source_id: str = ""
    scale_factor: int = 1

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 2 or self.pixels.size == 0:
            raise DataError(f"{self.source_id or 'image'}: pixels must be a non-empty 2-D array, got {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)) or self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise DataError(f"{self.source_id or 'image'}: pixel values must lie in [0, 1]")
        if self.scale_factor not in (1, 4):
            raise DataError(f"scale factor must be 1 or 4, got {self.scale_factor}")
        h, w = self.pixels.shape
        for box in self.boxes:
            if box.x1 < 0 or box.y1 < 0 or box.x2 > w or box.y2 > h:
                raise DataError(f"{self.source_id or 'image'}: box {box.corners} outside {w}x{h} image")

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    def replace(self, pixels: np.ndarray | None = None, boxes: List[Box] | None = None) -> "AnnotatedImage":
        return AnnotatedImage(
            pixels=self.pixels if pixels is None else pixels,
            boxes=list(self.boxes) if boxes is None else boxes,
            source_id=self.source_id,
            scale_factor=self.scale_factor,
        )


class ImageProvider(Protocol):
    """Protocol describing an indexable source of annotated frames."""

    def __len__(self) -> int:
        ...

    def load(self, index: int) -> AnnotatedImage:
        ...


@dataclass(slots=True)
class ManifestEntry:
    image: Path
    label: Path
    scale: int = 1


def read_manifest(path: Path) -> List[ManifestEntry]:
    """
    One sample per line: ``image<TAB>label[<TAB>scale=4]``. Relative paths
    resolve against the manifest's directory.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    entries: List[ManifestEntry] = []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise DataError(f"{path}:{number}: expected image<TAB>label[<TAB>scale=N], got {len(parts)} fields")
        scale = 1
        if len(parts) == 3:
            key, _, value = parts[2].partition("=")
            if key.strip() != "scale" or value.strip() not in ("1", "4"):
                raise DataError(f"{path}:{number}: third field must be scale=1 or scale=4, got {parts[2]!r}")
            scale = int(value)
        image, label = (path.parent / p.strip() for p in parts[:2])
        entries.append(ManifestEntry(image=image, label=label, scale=scale))
    return entries


def write_manifest(path: Path, entries: Sequence[ManifestEntry]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for entry in entries:
        fields = [_relative(entry.image, path.parent), _relative(entry.label, path.parent)]
        if entry.scale != 1:
            fields.append(f"scale={entry.scale}")
        lines.append("\t".join(fields))
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def _relative(target: Path, base: Path) -> str:
    try:
        return Path(target).resolve().relative_to(base.resolve()).as_posix()
    except ValueError:
        return Path(target).as_posix()


class ManifestDataset(ImageProvider):
    """
    Frames listed in a manifest: PGM images with VOC XML or YOLO text labels.
    """

    def __init__(self, manifest: Path, class_names: Sequence[str] | None = None) -> None:
        self.manifest = Path(manifest)
        self.entries = read_manifest(self.manifest)
        self.class_names = class_names

    def __len__(self) -> int:
        return len(self.entries)

    def load(self, index: int) -> AnnotatedImage:
        from .imageio import read_pgm
        from .labels import load_label_file

        entry = self.entries[index]
        pixels = read_pgm(entry.image)
        h, w = pixels.shape
        boxes = load_label_file(entry.label, w, h, self.class_names)
        return AnnotatedImage(pixels=pixels, boxes=boxes, source_id=entry.image.stem, scale_factor=entry.scale)


class InMemoryDataset(ImageProvider):
    def __init__(self, images: Sequence[AnnotatedImage]) -> None:
        self.images = list(images)

    def __len__(self) -> int:
        return len(self.images)

    def load(self, index: int) -> AnnotatedImage:
        return self.images[index]


def split_dataset(
    items: Sequence[T], ratios: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 0
) -> Tuple[List[T], List[T], List[T]]:
    """
    Seeded permutation cut into train/val/test by largest-remainder sizing.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError(f"need three non-negative ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {sum(ratios)}")
    n = len(items)
    quotas = [r * n for r in ratios]
    sizes = [int(np.floor(q + 1e-9)) for q in quotas]
    remainders = sorted(range(3), key=lambda i: -(quotas[i] - sizes[i]))
    for i in remainders[: n - sum(sizes)]:
        sizes[i] += 1

    order = np.random.default_rng(seed).permutation(n)
    shuffled = [items[int(i)] for i in order]
    train = shuffled[: sizes[0]]
    val = shuffled[sizes[0] : sizes[0] + sizes[1]]
    test = shuffled[sizes[0] + sizes[1] :]
    if n:
        for name, part in (("train", train), ("val", val), ("test", test)):
            if not part:
                logger.warning("Split %s is empty for %s items at ratios %s", name, n, tuple(ratios))
    return train, val, test


def targets_from_boxes(boxes: Sequence[Box], width: int, height: int) -> np.ndarray:
    """(k, 5) rows of class, cx, cy, w, h normalized by the given extent."""
    rows = [
        (b.class_id, (b.x1 + b.x2) / 2 / width, (b.y1 + b.y2) / 2 / height, b.width / width, b.height / height)
        for b in boxes
    ]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 5)


def padded_size(height: int, width: int, divisor: int = BATCH_DIVISOR) -> Tuple[int, int]:
    return (-(-height // divisor) * divisor, -(-width // divisor) * divisor)


def collate(images: Sequence[AnnotatedImage], dtype: np.dtype | None = None) -> Tuple[np.ndarray, List[np.ndarray]]:
    """
    Stack frames into N x 1 x H x W, zero-padded bottom/right to a multiple of
    32, with targets normalized to the padded extent.
    """
    if not images:
        raise DataError("cannot collate an empty batch")
    height = max(image.height for image in images)
    width = max(image.width for image in images)
    ph, pw = padded_size(height, width)
    batch = np.zeros((len(images), 1, ph, pw), dtype=dtype or get_dtype())
    targets = []
    for index, image in enumerate(images):
        batch[index, 0, : image.height, : image.width] = image.pixels
        targets.append(targets_from_boxes(image.boxes, pw, ph))
    return batch, targets


def load_all(provider: ImageProvider) -> List[AnnotatedImage]:
    return [provider.load(index) for index in range(len(provider))]
