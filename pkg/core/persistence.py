"""
Persistence layer for checkpoints and training logs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from config.settings import ModelConfig, model_config_from_dict, model_config_to_dict

from .detnet import Detector
from .errors import CheckpointError
from .optimizer import AdamState
from .utils import format_record, now_utc, parse_record

MAGIC = b"IRNETCKP"
FORMAT_VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}

PARAM_PREFIX = "param/"
ADAM_M_PREFIX = "adam.m/"
ADAM_V_PREFIX = "adam.v/"


@dataclass
class Checkpoint:
    config: ModelConfig
    model: Detector
    state: AdamState | None
    step: int
    extra: Dict[str, Any]


def _encode_record(name: str, array: np.ndarray) -> bytes:
    data = np.ascontiguousarray(array)
    dtype = data.dtype.newbyteorder("<")
    if dtype not in DTYPE_CODES:
        raise CheckpointError(f"unsupported dtype {data.dtype} for {name}")
    encoded_name = name.encode("utf-8")
    header = struct.pack("<H", len(encoded_name)) + encoded_name
    header += struct.pack("<B", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape)
    header += struct.pack("<B", DTYPE_CODES[dtype])
    return header + data.astype(dtype, copy=False).tobytes()


def save_checkpoint(
    path: Path,
    model: Detector,
    state: AdamState | None = None,
    step: int | None = None,
    extra: Dict[str, Any] | None = None,
) -> Path:
    """
    Little-endian layout: magic, version u32, JSON header (u32 length), step
    u64, record count u32, then name/shape/dtype/data records.
    """
    records: List[Tuple[str, np.ndarray]] = [
        (PARAM_PREFIX + name, tensor.data) for name, tensor in model.parameters().items()
    ]
    header: Dict[str, Any] = {"model": model_config_to_dict(model.config), "extra": extra or {}}
    if state is not None:
        header["optimizer"] = {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps}
        records.extend((ADAM_M_PREFIX + name, value) for name, value in state.m.items())
        records.extend((ADAM_V_PREFIX + name, value) for name, value in state.v.items())
    counter = step if step is not None else (state.step if state is not None else 0)

    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<I", len(header_bytes)),
        header_bytes,
        struct.pack("<Q", counter),
        struct.pack("<I", len(records)),
    ]
    chunks.extend(_encode_record(name, array) for name, array in records)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, payload: bytes) -> None:
        self.payload = payload
        self.offset = 0

    def take(self, count: int, what: str) -> bytes:
        end = self.offset + count
        if end > len(self.payload):
            raise CheckpointError(f"truncated checkpoint while reading {what}", self.offset)
        chunk = self.payload[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint_records(payload: bytes) -> Tuple[Dict[str, Any], int, Dict[str, np.ndarray]]:
    reader = _Reader(payload)
    if reader.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("not a detector checkpoint (bad magic)", 0)
    (version,) = reader.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {FORMAT_VERSION})", 8)
    (header_len,) = reader.unpack("<I", "header length")
    header_offset = reader.offset
    try:
        header = json.loads(reader.take(header_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}", header_offset) from exc
    (step,) = reader.unpack("<Q", "step counter")
    (count,) = reader.unpack("<I", "record count")

    records: Dict[str, np.ndarray] = {}
    for _ in range(count):
        start = reader.offset
        (name_len,) = reader.unpack("<H", "record name length")
        try:
            name = reader.take(name_len, "record name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"bad record name: {exc}", start) from exc
        (ndim,) = reader.unpack("<B", f"{name} rank")
        shape = reader.unpack(f"<{ndim}I", f"{name} shape") if ndim else ()
        (code,) = reader.unpack("<B", f"{name} dtype")
        if code not in CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}", reader.offset - 1)
        dtype = CODE_DTYPES[code]
        size = int(np.prod(shape)) * dtype.itemsize
        data = reader.take(size, f"{name} data")
        records[name] = np.frombuffer(data, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if reader.offset != len(payload):
        raise CheckpointError("trailing bytes after last record", reader.offset)
    return header, int(step), records


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    header, step, records = read_checkpoint_records(payload)
    try:
        config = model_config_from_dict(header["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint model config is invalid: {exc}") from exc

    model = Detector(config)
    params = model.parameters()
    for name, tensor in params.items():
        key = PARAM_PREFIX + name
        if key not in records:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        if records[key].shape != tensor.data.shape:
            raise CheckpointError(f"parameter {name} has shape {records[key].shape}, model expects {tensor.data.shape}")
        tensor.data = records[key].copy()
    unknown = [k[len(PARAM_PREFIX) :] for k in records if k.startswith(PARAM_PREFIX) and k[len(PARAM_PREFIX) :] not in params]
    if unknown:
        raise CheckpointError(f"checkpoint has parameters the model does not: {unknown[:3]}")

    state = None
    if "optimizer" in header:
        opt = header["optimizer"]
        state = AdamState(lr=opt["lr"], beta1=opt["beta1"], beta2=opt["beta2"], eps=opt["eps"], step=step)
        for key, value in records.items():
            if key.startswith(ADAM_M_PREFIX):
                state.m[key[len(ADAM_M_PREFIX) :]] = value.copy()
            elif key.startswith(ADAM_V_PREFIX):
                state.v[key[len(ADAM_V_PREFIX) :]] = value.copy()
    return Checkpoint(config=config, model=model, state=state, step=step, extra=header.get("extra", {}))


def ensure_config_matches(checkpoint: Checkpoint, config: ModelConfig) -> None:
    """Reject evaluating a checkpoint under a different model configuration."""
    saved = model_config_to_dict(checkpoint.config)
    wanted = model_config_to_dict(config)
    diffs = sorted(key for key in saved if saved[key] != wanted.get(key))
    if diffs:
        raise CheckpointError(f"model config disagrees with checkpoint on: {', '.join(diffs)}")


class TrainingLog:
    """
    Line-oriented training log: header, one key=value record per epoch, events, summary.
    """

    def __init__(self, log_dir: Path) -> None:
        self.log_dir = Path(log_dir)
        self.log_dir.mkdir(parents=True, exist_ok=True)
        self.path = self.log_dir / "train.log"
        self.started: Optional[datetime] = None

    def start(self, resume: bool = False, **fields: Any) -> None:
        self.started = now_utc()
        mode = "a" if resume and self.path.exists() else "w"
        with self.path.open(mode, encoding="utf-8") as file:
            file.write(format_record(event="start", time=self.started.isoformat(), **fields) + "\n")

    def log_epoch(self, **fields: Any) -> None:
        with self.path.open("a", encoding="utf-8") as file:
            file.write(format_record(**fields) + "\n")

    def log_event(self, message: str) -> None:
        with self.path.open("a", encoding="utf-8") as file:
            file.write(f"[{now_utc().isoformat()}] {message}\n")

    def finish(self, **summary: Any) -> None:
        end = now_utc()
        duration = (end - self.started) if self.started else None
        with self.path.open("a", encoding="utf-8") as file:
            file.write(format_record(event="finish", time=end.isoformat(), duration=duration, **summary) + "\n")

    def epochs(self) -> List[Dict[str, str]]:
        if not self.path.exists():
            return []
        rows = []
        for line in self.path.read_text(encoding="utf-8").splitlines():
            record = parse_record(line)
            if "epoch" in record and "event" not in record:
                rows.append(record)
        return rows
