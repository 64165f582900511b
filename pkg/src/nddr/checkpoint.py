"""Flat binary serialization of named float arrays.

Layout (all integers little-endian):

    magic   4 bytes  b"NDDR"
    version u32      currently 1
    count   u64      number of records
    record: name_len u32, name utf-8 bytes,
            dtype    u8 (1 = float32, 2 = float64),
            ndim     u8, dims u64 * ndim,
            values   raw little-endian, C order
    trailer (optional): json_len u32, utf-8 JSON {"step": int, "config": {...}}

Files that stop after the records section load with step 0 and an empty
config. Loading validates everything before returning, so a bad file never
leaves a target graph half-mutated.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

__all__ = ["MAGIC", "VERSION", "CheckpointError", "Checkpoint", "save_checkpoint", "load_checkpoint"]

MAGIC = b"NDDR"
VERSION = 1

_TAG_BY_DTYPE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_DTYPE_BY_TAG = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class CheckpointError(ValueError):
    """Malformed checkpoint bytes (bad magic, truncation, unknown tags)."""


@dataclass
class Checkpoint:
    records: "OrderedDict[str, np.ndarray]"
    step: int = 0
    config: dict = field(default_factory=dict)


def save_checkpoint(path, records: Mapping[str, np.ndarray], step: int = 0, config: Optional[dict] = None) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAG_BY_DTYPE:
            raise CheckpointError(f"record '{name}' has unsupported dtype {arr.dtype} (float32/float64 only)")
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<BB", _TAG_BY_DTYPE[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        chunks.append(np.ascontiguousarray(le).tobytes())
    trailer = json.dumps({"step": int(step), "config": config or {}}).encode("utf-8")
    chunks.append(struct.pack("<I", len(trailer)))
    chunks.append(trailer)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint: ran out of bytes reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def remaining(self) -> int:
        return len(self.buf) - self.pos


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(f"bad magic in '{path}': not a checkpoint file")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (writer supports {VERSION})")
    count = r.u64("record count")
    records: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for idx in range(count):
        name_len = r.u32(f"record {idx} name length")
        try:
            name = r.take(name_len, f"record {idx} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"record {idx} name is not valid utf-8") from exc
        tag = r.u8(f"record '{name}' dtype tag")
        if tag not in _DTYPE_BY_TAG:
            raise CheckpointError(f"record '{name}' has unknown dtype tag {tag}")
        ndim = r.u8(f"record '{name}' ndim")
        dims = struct.unpack(f"<{ndim}Q", r.take(8 * ndim, f"record '{name}' dims")) if ndim else ()
        dtype = _DTYPE_BY_TAG[tag]
        n_vals = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        raw = r.take(n_vals * dtype.itemsize, f"record '{name}' values")
        arr = np.frombuffer(raw, dtype=dtype, count=n_vals).reshape(dims).copy()
        if name in records:
            raise CheckpointError(f"duplicate record name '{name}'")
        records[name] = arr.astype(arr.dtype.newbyteorder("="), copy=False)
    step = 0
    config: dict = {}
    if r.remaining():
        json_len = r.u32("trailer length")
        try:
            trailer = json.loads(r.take(json_len, "trailer").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError("corrupt metadata trailer") from exc
        step = int(trailer.get("step", 0))
        config = trailer.get("config", {})
    return Checkpoint(records=records, step=step, config=config)
