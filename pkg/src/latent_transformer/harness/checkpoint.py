"""Versioned flat binary checkpoints.

Layout (all integers little-endian)::

    b"LTCK" | u32 version | u64 header length | header JSON (UTF-8) | tensor data

The header lists every tensor as ``{"name", "dtype", "shape", "offset"}`` with
offsets relative to the start of the data section, plus a free-form ``meta``
object. Tensors are stored little-endian and C-contiguous. JSON is written
with sorted keys and no whitespace so equal states give equal bytes.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import CheckpointError

MAGIC = b"LTCK"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _dtype_code(arr: np.ndarray) -> str:
    if np.issubdtype(arr.dtype, np.floating):
        return "f8"
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
        return "i8"
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def to_bytes(ckpt: Checkpoint, version: int = VERSION) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = json.dumps(
        {"tensors": entries, "meta": ckpt.meta}, sort_keys=True, separators=(",", ":"),
        allow_nan=False,
    ).encode("utf-8")
    return _PREFIX.pack(MAGIC, version, len(header)) + header + b"".join(chunks)


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < _PREFIX.size:
        raise CheckpointError("checkpoint truncated before header")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} not supported (expected {VERSION})")
    start = _PREFIX.size + hlen
    if len(blob) < start:
        raise CheckpointError("checkpoint truncated inside header")
    try:
        header = json.loads(blob[_PREFIX.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    tensors = {}
    for entry in header["tensors"]:
        dt = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        lo = start + entry["offset"]
        hi = lo + count * dt.itemsize
        if hi > len(blob):
            raise CheckpointError(f"tensor {entry['name']!r} runs past end of file")
        tensors[entry["name"]] = np.frombuffer(blob, dtype=dt, count=count, offset=lo).reshape(shape).copy()
    return Checkpoint(tensors, header["meta"])


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically: a partial file never replaces a good one."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return from_bytes(blob)
