"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic "PFCK" | u16 version (= 1) | u32 meta_len | meta JSON (UTF-8)
    u32 array_count
    per array:
        u32 name_len | name (UTF-8)
        u8 dtype code (0 = float32, 1 = float64)
        u8 ndim | u32 x ndim extents
        raw little-endian row-major values

The meta JSON holds {"config": ModelConfig fields, "step": int, "rng": bit
generator state or null}. Array names carry a section prefix: "param/",
"buffer/", "adam_m/", "adam_v/". Arrays are written in sorted-name order and
the JSON uses sorted keys, so identical state serializes to identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DataError

MAGIC = b"PFCK"
VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class Checkpoint:
    config: dict
    step: int = 0
    rng_state: Optional[dict] = None
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)


def _write_array(out, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    arr = np.ascontiguousarray(arr)
    code = _DTYPE_CODES.get(arr.dtype.newbyteorder("<"))
    if code is None:
        raise DataError(f"unsupported dtype {arr.dtype} for '{name}'")
    out.write(struct.pack("<I", len(encoded)))
    out.write(encoded)
    out.write(struct.pack("<BB", code, arr.ndim))
    for extent in arr.shape:
        out.write(struct.pack("<I", extent))
    out.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = json.dumps(
        {"config": ckpt.config, "step": ckpt.step, "rng": ckpt.rng_state},
        sort_keys=True,
    ).encode("utf-8")
    sections = []
    for prefix, table in (("param", ckpt.params), ("buffer", ckpt.buffers),
                          ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v)):
        for name in sorted(table):
            sections.append((f"{prefix}/{name}", table[name]))
    with open(path, "wb") as out:
        out.write(MAGIC)
        out.write(struct.pack("<H", VERSION))
        out.write(struct.pack("<I", len(meta)))
        out.write(meta)
        out.write(struct.pack("<I", len(sections)))
        for name, arr in sections:
            _write_array(out, name, arr)


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.path = path
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.blob):
            raise DataError(
                f"truncated checkpoint '{self.path}' at byte {self.pos}"
            )
        chunk = self.blob[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as handle:
        blob = handle.read()
    reader = _Reader(blob, path)
    if reader.take(4) != MAGIC:
        raise DataError(f"'{path}' is not a checkpoint (bad magic)")
    version = reader.u16()
    if version != VERSION:
        raise DataError(
            f"checkpoint version {version} unsupported (expected {VERSION})"
        )
    try:
        meta = json.loads(reader.take(reader.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint metadata in '{path}': {exc}") from None
    ckpt = Checkpoint(config=meta.get("config", {}), step=int(meta.get("step", 0)),
                      rng_state=meta.get("rng"))
    tables = {"param": ckpt.params, "buffer": ckpt.buffers,
              "adam_m": ckpt.adam_m, "adam_v": ckpt.adam_v}
    count = reader.u32()
    for _ in range(count):
        name = reader.take(reader.u32()).decode("utf-8")
        code = reader.u8()
        if code not in _CODE_DTYPES:
            raise DataError(f"unknown dtype code {code} for '{name}'")
        ndim = reader.u8()
        shape = tuple(reader.u32() for _ in range(ndim))
        dtype = _CODE_DTYPES[code]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(reader.take(n_bytes), dtype=dtype).reshape(shape)
        prefix, _, rest = name.partition("/")
        if prefix not in tables or not rest:
            raise DataError(f"unknown checkpoint section for array '{name}'")
        tables[prefix][rest] = arr.copy()
    if reader.pos != len(blob):
        raise DataError(
            f"trailing bytes after checkpoint payload in '{path}'"
        )
    return ckpt
