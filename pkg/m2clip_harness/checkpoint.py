"""Binary checkpoints: named tensor table plus the experiment config snapshot.

Layout (little-endian)::

    b"M2CK"  u32 version  u32 tensor_count
    per tensor: u16 name_len, name (UTF-8), u8 dtype (0 = f32, 1 = f64),
                u8 rank, u64 dim * rank, raw payload
    u32 config_len, config text (UTF-8, ``key = value`` lines and ``step = N``)

Frozen tensors are stored too; the file alone rebuilds the whole model.
"""

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from m2clip.exceptions import ConfigurationError, DimensionError, FormatError
from m2clip.model import M2Clip

from .config import ExperimentConfig, config_from_text
from .trainer import build_model

logger = logging.getLogger(__name__)

MAGIC = b"M2CK"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_TAGS = {"f32": 0, "f64": 1}


@dataclass
class TensorRecord:
    name: str
    dtype: int
    values: np.ndarray


@dataclass
class Checkpoint:
    tensors: List[TensorRecord] = field(default_factory=list)
    config_text: str = ""
    step: int = 0

    @property
    def dtype(self) -> str:
        tags = {record.dtype for record in self.tensors}
        return "f64" if tags == {1} else "f32"

    def config(self) -> ExperimentConfig:
        try:
            return config_from_text(self.config_text)
        except ConfigurationError as e:
            raise FormatError(f"Checkpoint config snapshot is invalid: {e}")


def split_snapshot(text: str) -> Tuple[str, int]:
    """Separate the ``step = N`` line from the config keys"""
    lines, step = [], 0
    for line in text.splitlines():
        key, _, value = line.partition("=")
        if key.strip() == "step":
            try:
                step = int(value.strip())
            except ValueError:
                raise FormatError(f"Bad step line in checkpoint config: {line!r}")
        else:
            lines.append(line)
    return "\n".join(lines) + "\n", step


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(checkpoint.tensors))]
    for record in checkpoint.tensors:
        name = record.name.encode("utf-8")
        values = np.ascontiguousarray(record.values, dtype=DTYPES[record.dtype])
        chunks.append(struct.pack("<H", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<BB", record.dtype, values.ndim))
        chunks.append(struct.pack(f"<{values.ndim}Q", *values.shape))
        chunks.append(values.tobytes())
    text = snapshot_text_bytes(checkpoint)
    chunks.append(struct.pack("<I", len(text)))
    chunks.append(text)
    return b"".join(chunks)


def snapshot_text_bytes(checkpoint: Checkpoint) -> bytes:
    body = checkpoint.config_text if checkpoint.config_text.endswith("\n") else checkpoint.config_text + "\n"
    return (body + f"step = {checkpoint.step}\n").encode("utf-8")


class _Reader:
    def __init__(self, blob: bytes, source: str):
        self.blob = blob
        self.offset = 0
        self.source = source

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.blob):
            raise FormatError(f"{self.source}: truncated while reading {what}")
        chunk = self.blob[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(blob: bytes, source: str = "<checkpoint>") -> Checkpoint:
    """Parse checkpoint bytes.

    Raises:
        FormatError: On a bad magic, unknown version or dtype, truncation or trailing bytes
    """
    reader = _Reader(blob, source)
    if reader.take(4, "magic") != MAGIC:
        raise FormatError(f"{source}: not an m2clip checkpoint (bad magic)")
    version, count = reader.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version} (expected {VERSION})")

    checkpoint = Checkpoint()
    for index in range(count):
        (name_len,) = reader.unpack("<H", f"tensor {index} name length")
        try:
            name = reader.take(name_len, f"tensor {index} name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{source}: tensor {index} name is not UTF-8")
        tag, rank = reader.unpack("<BB", f"{name} header")
        if tag not in DTYPES:
            raise FormatError(f"{source}: {name} has unknown dtype tag {tag}")
        shape = reader.unpack(f"<{rank}Q", f"{name} shape")
        dtype = DTYPES[tag]
        size = math.prod(shape)
        remaining = len(blob) - reader.offset
        if size * dtype.itemsize > remaining:
            raise FormatError(f"{source}: {name} declares shape {shape} but only {remaining} bytes remain")
        payload = reader.take(size * dtype.itemsize, f"{name} payload")
        try:
            values = np.frombuffer(payload, dtype=dtype).reshape(shape)
        except (ValueError, OverflowError) as e:
            raise FormatError(f"{source}: {name} has an unusable shape {shape}: {e}")
        checkpoint.tensors.append(TensorRecord(name, tag, values))

    (text_len,) = reader.unpack("<I", "config length")
    try:
        text = reader.take(text_len, "config text").decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError(f"{source}: config snapshot is not UTF-8")
    if reader.offset != len(blob):
        raise FormatError(f"{source}: {len(blob) - reader.offset} trailing bytes after config snapshot")
    checkpoint.config_text, checkpoint.step = split_snapshot(text)
    return checkpoint


def read_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), str(path))


def write_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(checkpoint))
    return path


def save_checkpoint(
    model: M2Clip,
    path: Union[str, Path],
    cfg: Optional[ExperimentConfig] = None,
    dtype: Optional[str] = None,
) -> Path:
    """Write every parameter (trainable and frozen) in registry order.

    ``cfg`` defaults to the config the model was built from; ``dtype``
    defaults to the tag the model was loaded with, else ``f32``.
    """
    cfg = cfg or model.experiment
    if cfg is None:
        raise ConfigurationError("save_checkpoint needs the experiment config the model was built from")
    dtype = dtype or model.checkpoint_dtype
    if dtype not in DTYPE_TAGS:
        raise ConfigurationError(f"Checkpoint dtype must be one of {sorted(DTYPE_TAGS)}, got {dtype!r}")
    tag = DTYPE_TAGS[dtype]

    records = []
    for name, param in model.named_parameters():
        if tag == 0 and not np.array_equal(param.data.astype(np.float32), param.data):
            logger.debug("%s is not on the f32 grid; f32 checkpoint rounds it", name)
        records.append(TensorRecord(name, tag, param.data))

    checkpoint = Checkpoint(records, cfg.to_text(), model.step)
    path = write_checkpoint(checkpoint, path)
    logger.info("Saved %d tensors (step %d, %s) to %s", len(records), model.step, dtype, path)
    return path


def load_checkpoint(path: Union[str, Path], model: Optional[M2Clip] = None) -> M2Clip:
    """Restore a model from ``path``; builds one from the snapshot when ``model`` is None.

    Raises:
        FormatError: If the file cannot be decoded
        DimensionError: If the tensor table does not match the model, naming the first mismatch
    """
    checkpoint = read_checkpoint(path)
    cfg = checkpoint.config()
    if model is None:
        model = build_model(cfg)

    params = list(model.named_parameters())
    for index, record in enumerate(checkpoint.tensors):
        if index >= len(params):
            raise DimensionError(f"Checkpoint tensor {record.name} has no counterpart in the model")
        name, param = params[index]
        if record.name != name:
            raise DimensionError(f"Checkpoint tensor {index} is {record.name}, model expects {name}")
        if record.values.shape != param.shape:
            raise DimensionError(
                f"Shape mismatch for {name}: checkpoint {record.values.shape}, model {param.shape}"
            )
    if len(params) > len(checkpoint.tensors):
        raise DimensionError(f"Model tensor {params[len(checkpoint.tensors)][0]} missing from checkpoint")

    for (_, param), record in zip(params, checkpoint.tensors):
        param.data = record.values.astype(np.float64)
        param.grad = None
    model.step = checkpoint.step
    model.experiment = cfg
    model.checkpoint_dtype = checkpoint.dtype
    logger.info("Loaded %d tensors (step %d) from %s", len(params), model.step, path)
    return model
