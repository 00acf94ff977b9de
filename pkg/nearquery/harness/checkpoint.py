"""
Checkpoint persistence.

File layout::

    b"NQCKPT1\\0"                      8-byte magic
    u64 little-endian                 header length in bytes
    header                            UTF-8 JSON, sorted keys
    blobs                             raw little-endian tensors, back to back

The header maps every tensor name to ``{"dtype", "shape", "offset"}`` (offset
relative to the first blob byte). The reserved ``__meta__`` entry carries the
model configuration and the optimiser hyper-parameters. Loading validates
the whole file before any tensor is handed out.
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from nearquery.exceptions import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointTruncatedError,
)
from nearquery.numcore.optim import AdamState

logger = logging.getLogger(__name__)

MAGIC = b"NQCKPT1\x00"
META_KEY = "__meta__"
ADAM_M_PREFIX = "adam.m."
ADAM_V_PREFIX = "adam.v."

_DTYPES = {"f32": "<f4", "f64": "<f8"}
_NATIVE = {"f32": np.float32, "f64": np.float64}


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    meta: Dict[str, Any] = field(default_factory=dict)

    def params(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith((ADAM_M_PREFIX, ADAM_V_PREFIX))}

    @property
    def has_optimizer(self) -> bool:
        return any(k.startswith(ADAM_M_PREFIX) for k in self.tensors)


def _dtype_tag(array: np.ndarray) -> str:
    if array.dtype == np.float64:
        return "f64"
    if array.dtype == np.float32:
        return "f32"
    raise CheckpointError(f"unsupported tensor dtype {array.dtype}")


def save_checkpoint(
    path: Union[str, Path],
    params: Dict[str, np.ndarray],
    adam: Optional[AdamState] = None,
    meta: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write parameters (and optionally Adam moments) to ``path``"""
    tensors: Dict[str, np.ndarray] = dict(params)
    meta = dict(meta or {})
    if adam is not None:
        names = list(params)
        if len(names) != len(adam.first_moment):
            raise CheckpointError(
                f"{len(adam.first_moment)} optimizer accumulators for {len(names)} parameters"
            )
        for name, m, v in zip(names, adam.first_moment, adam.second_moment):
            tensors[ADAM_M_PREFIX + name] = m
            tensors[ADAM_V_PREFIX + name] = v
        meta["adam"] = adam.hyperparameters()

    header: Dict[str, Any] = {META_KEY: meta}
    blobs: List[bytes] = []
    offset = 0
    for name in sorted(tensors):
        array = np.asarray(tensors[name])
        tag = _dtype_tag(array)
        blob = array.astype(_DTYPES[tag]).tobytes(order="C")
        header[name] = {"dtype": tag, "shape": list(array.shape), "offset": offset}
        blobs.append(blob)
        offset += len(blob)

    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)
    tmp.replace(path)
    logger.debug(f"Saved checkpoint {path} ({len(tensors)} tensors, {offset} blob bytes)")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Read and validate a checkpoint file"""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic {raw[:len(MAGIC)]!r}, expected {MAGIC!r}")
    if len(raw) < len(MAGIC) + 8:
        raise CheckpointTruncatedError(f"{path}: file ends inside the header length field")
    (header_len,) = struct.unpack("<Q", raw[len(MAGIC):len(MAGIC) + 8])
    header_start = len(MAGIC) + 8
    blob_start = header_start + header_len
    if blob_start > len(raw):
        raise CheckpointTruncatedError(
            f"{path}: header of {header_len} bytes but only {len(raw) - header_start} available"
        )
    try:
        header = json.loads(raw[header_start:blob_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header ({e})") from e

    meta = header.pop(META_KEY, {})
    tensors: Dict[str, np.ndarray] = {}
    for name in sorted(header):
        entry = header[name]
        dtype = _DTYPES.get(entry.get("dtype"))
        if dtype is None:
            raise CheckpointError(f"{path}: tensor {name} has unknown dtype {entry.get('dtype')!r}")
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = blob_start + int(entry["offset"])
        end = start + count * np.dtype(dtype).itemsize
        if end > len(raw):
            raise CheckpointTruncatedError(
                f"{path}: tensor {name} needs bytes {start}..{end}, file has {len(raw)}"
            )
        array = np.frombuffer(raw, dtype=dtype, count=count, offset=start).reshape(shape)
        tensors[name] = array.astype(_NATIVE[entry["dtype"]])
    return Checkpoint(tensors=tensors, meta=meta)


def load_into(model, checkpoint: Checkpoint, adam: Optional[AdamState] = None) -> None:
    """Copy checkpoint tensors into a model (and optimiser) after checking every shape"""
    named = list(model.named_parameters())
    stored = checkpoint.params()
    expected = {name for name, _ in named}
    missing = sorted(expected - set(stored))
    extra = sorted(set(stored) - expected)
    if missing:
        raise CheckpointShapeError(f"checkpoint lacks tensor {missing[0]} ({len(missing)} missing)")
    if extra:
        raise CheckpointShapeError(f"checkpoint has unexpected tensor {extra[0]} ({len(extra)} extra)")
    for name, param in named:
        if stored[name].shape != param.shape:
            raise CheckpointShapeError(
                f"tensor {name}: checkpoint shape {stored[name].shape} vs model shape {param.shape}"
            )
    if adam is not None and checkpoint.has_optimizer:
        for name, _ in named:
            if ADAM_M_PREFIX + name not in checkpoint.tensors:
                raise CheckpointShapeError(f"checkpoint lacks optimizer moments for {name}")

    for name, param in named:
        param.data = stored[name].astype(param.dtype, copy=True)
    if adam is not None and checkpoint.has_optimizer:
        adam.first_moment = [checkpoint.tensors[ADAM_M_PREFIX + n].copy() for n, _ in named]
        adam.second_moment = [checkpoint.tensors[ADAM_V_PREFIX + n].copy() for n, _ in named]
        hyper = checkpoint.meta.get("adam", {})
        adam.step_count = int(hyper.get("step_count", adam.step_count))


__all__ = [
    "MAGIC",
    "META_KEY",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "load_into",
]
