"""
Label formats: LABELIMG-style VOC XML and YOLO normalized text.

VOC boxes are 1-based inclusive pixel ranges; internally boxes are 0-based
half-open, so ``xmin..xmax`` becomes ``[xmin - 1, xmax)``.
"""

from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

from .data_handler import Box
from .errors import DataError, LabelError
from .utils import configure_logger

DEFAULT_CLASS_NAMES = ("target",)
MAX_CLASS_DIGITS = 9

logger = configure_logger("labels")


@dataclass
class VocAnnotation:
    filename: str = ""
    width: Optional[int] = None
    height: Optional[int] = None
    boxes: List[Box] = field(default_factory=list)


def _number(text: Optional[str], field_name: str, line: int | None = None) -> float:
    if text is None or not text.strip():
        raise LabelError("missing value", line=line, field=field_name)
    try:
        value = float(text.strip())
    except ValueError as exc:
        raise LabelError(f"not a number: {text.strip()!r}", line=line, field=field_name) from exc
    if not math.isfinite(value):
        raise LabelError(f"non-finite value {text.strip()!r}", line=line, field=field_name)
    return value


def _class_id(name: str, class_names: Sequence[str], field_name: str) -> Optional[int]:
    if name in class_names:
        return list(class_names).index(name)
    if not (name.isascii() and name.isdigit()):
        return None
    if len(name) > MAX_CLASS_DIGITS:
        raise LabelError(f"class id {name[:16]}... has more than {MAX_CLASS_DIGITS} digits", field=field_name)
    return int(name)


def parse_voc_xml(data: bytes, class_names: Sequence[str] = DEFAULT_CLASS_NAMES) -> VocAnnotation:
    """
    Parse ``annotation/object/bndbox`` records. Unknown class names are skipped
    with a warning; every other defect raises LabelError.
    """
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        line = exc.position[0] if getattr(exc, "position", None) else None
        raise LabelError(f"malformed XML: {exc}", line=line) from exc
    except (ValueError, TypeError, LookupError) as exc:
        raise LabelError(f"unreadable XML: {exc}") from exc
    if root.tag != "annotation":
        raise LabelError(f"root element is <{root.tag}>, expected <annotation>", field="annotation")

    annotation = VocAnnotation(filename=(root.findtext("filename") or "").strip())
    size = root.find("size")
    if size is not None:
        width = _number(size.findtext("width"), "size/width")
        height = _number(size.findtext("height"), "size/height")
        if width < 1 or height < 1 or width != int(width) or height != int(height):
            raise LabelError(f"invalid image size {width}x{height}", field="size")
        annotation.width, annotation.height = int(width), int(height)

    for index, obj in enumerate(root.findall("object")):
        where = f"object[{index}]"
        name = (obj.findtext("name") or "").strip()
        if not name:
            raise LabelError("missing class name", field=f"{where}/name")
        bndbox = obj.find("bndbox")
        if bndbox is None:
            raise LabelError("missing bndbox", field=f"{where}/bndbox")
        xmin, ymin, xmax, ymax = (
            _number(bndbox.findtext(key), f"{where}/bndbox/{key}") for key in ("xmin", "ymin", "xmax", "ymax")
        )
        if xmin > xmax:
            raise LabelError(f"inverted x range {xmin} > {xmax}", field=f"{where}/bndbox/xmax")
        if ymin > ymax:
            raise LabelError(f"inverted y range {ymin} > {ymax}", field=f"{where}/bndbox/ymax")
        if xmin < 1 or ymin < 1:
            raise LabelError(f"coordinates are 1-based, got xmin={xmin} ymin={ymin}", field=f"{where}/bndbox")
        if annotation.width is not None and (xmax > annotation.width or ymax > annotation.height):
            raise LabelError(
                f"box ({xmin},{ymin},{xmax},{ymax}) exceeds {annotation.width}x{annotation.height}",
                field=f"{where}/bndbox",
            )
        class_id = _class_id(name, class_names, f"{where}/name")
        if class_id is None:
            logger.warning("Skipping object with unknown class %r", name)
            continue
        try:
            annotation.boxes.append(Box(class_id, xmin - 1, ymin - 1, xmax, ymax))
        except DataError as exc:
            raise LabelError(str(exc), field=f"{where}/bndbox") from exc
    return annotation


def _fmt(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else f"{value:.3f}"


def format_voc_xml(
    boxes: Sequence[Box],
    filename: str,
    width: int,
    height: int,
    class_names: Sequence[str] = DEFAULT_CLASS_NAMES,
) -> bytes:
    root = ET.Element("annotation")
    ET.SubElement(root, "folder").text = "images"
    ET.SubElement(root, "filename").text = filename
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(width)
    ET.SubElement(size, "height").text = str(height)
    ET.SubElement(size, "depth").text = "1"
    ET.SubElement(root, "segmented").text = "0"
    for box in boxes:
        obj = ET.SubElement(root, "object")
        name = class_names[box.class_id] if box.class_id < len(class_names) else str(box.class_id)
        ET.SubElement(obj, "name").text = name
        ET.SubElement(obj, "pose").text = "Unspecified"
        ET.SubElement(obj, "truncated").text = "0"
        ET.SubElement(obj, "difficult").text = "0"
        bndbox = ET.SubElement(obj, "bndbox")
        ET.SubElement(bndbox, "xmin").text = _fmt(box.x1 + 1)
        ET.SubElement(bndbox, "ymin").text = _fmt(box.y1 + 1)
        ET.SubElement(bndbox, "xmax").text = _fmt(box.x2)
        ET.SubElement(bndbox, "ymax").text = _fmt(box.y2)
    ET.indent(root)
    return ET.tostring(root, encoding="utf-8", xml_declaration=False) + b"\n"


def parse_yolo_txt(data: bytes, width: int, height: int) -> List[Box]:
    """``class cx cy w h`` per line, normalized to [0, 1]; returns pixel corner boxes."""
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise LabelError(f"label file is not UTF-8: {exc}") from exc
    boxes: List[Box] = []
    for number, raw in enumerate(text.splitlines(), start=1):
        fields = raw.split()
        if not fields:
            continue
        if len(fields) != 5:
            raise LabelError(f"expected 5 fields, got {len(fields)}", line=number)
        try:
            class_id = int(fields[0])
        except ValueError as exc:
            raise LabelError(f"class id {fields[0]!r} is not an integer", line=number, field="class") from exc
        if class_id < 0:
            raise LabelError(f"negative class id {class_id}", line=number, field="class")
        cx, cy, bw, bh = (_number(v, name, number) for v, name in zip(fields[1:], ("cx", "cy", "w", "h")))
        for value, name in ((cx, "cx"), (cy, "cy"), (bw, "w"), (bh, "h")):
            if not 0.0 <= value <= 1.0:
                raise LabelError(f"{value} outside [0, 1]", line=number, field=name)
        if bw <= 0 or bh <= 0:
            raise LabelError("zero-sized box", line=number, field="w" if bw <= 0 else "h")
        x1 = max(0.0, (cx - bw / 2) * width)
        y1 = max(0.0, (cy - bh / 2) * height)
        x2 = min(float(width), (cx + bw / 2) * width)
        y2 = min(float(height), (cy + bh / 2) * height)
        if not (x1 < x2 and y1 < y2):
            raise LabelError("box collapses after clipping to the image", line=number)
        boxes.append(Box(class_id, x1, y1, x2, y2))
    return boxes


def format_yolo_txt(boxes: Sequence[Box], width: int, height: int) -> bytes:
    lines = [
        f"{b.class_id} {(b.x1 + b.x2) / 2 / width:.6f} {(b.y1 + b.y2) / 2 / height:.6f} "
        f"{b.width / width:.6f} {b.height / height:.6f}"
        for b in boxes
    ]
    return "".join(line + "\n" for line in lines).encode("utf-8")


def load_label_file(
    path: Path, width: int, height: int, class_names: Sequence[str] | None = None
) -> List[Box]:
    """Read a ``.xml`` or ``.txt`` label for an image of the given size."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read label {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".xml":
            annotation = parse_voc_xml(data, class_names or DEFAULT_CLASS_NAMES)
            if annotation.width is not None and (annotation.width, annotation.height) != (width, height):
                raise LabelError(
                    f"label size {annotation.width}x{annotation.height} does not match image {width}x{height}",
                    field="size",
                )
            return annotation.boxes
        if path.suffix.lower() == ".txt":
            return parse_yolo_txt(data, width, height)
    except LabelError as exc:
        raise LabelError(f"{path.name}: {exc}") from exc
    raise DataError(f"unsupported label format {path.suffix!r} for {path}")
