"""
Exception types raised across the detector pipeline.
"""

from __future__ import annotations


class ShapeError(ValueError):
    """Tensor shapes or channel counts do not fit the operation."""


class DataError(ValueError):
    """Malformed input data: labels, images, manifests, scene specs."""


class LabelError(DataError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None) -> None:
        location = []
        if line is not None:
            location.append(f"line {line}")
        if field is not None:
            location.append(f"field {field}")
        prefix = f"{', '.join(location)}: " if location else ""
        super().__init__(prefix + message)
        self.line = line
        self.field = field


class ImageFormatError(DataError):
    """Unreadable or unsupported graymap."""


class CheckpointError(DataError):
    def __init__(self, message: str, offset: int | None = None) -> None:
        suffix = f" (at byte offset {offset})" if offset is not None else ""
        super().__init__(message + suffix)
        self.offset = offset


class NumericError(RuntimeError):
    def __init__(self, message: str, location: str | None = None) -> None:
        suffix = f" [{location}]" if location else ""
        super().__init__(message + suffix)
        self.location = location
