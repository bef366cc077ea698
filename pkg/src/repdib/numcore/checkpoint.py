"""Flat binary parameter checkpoints.

Layout (little-endian)::

    b"RPDB" | version:u32 | count:u32 | records...
    record = name_len:u32 | name:utf8 | ndim:u32 | dims:u32*ndim | payload:f32*prod(dims)

Non-array metadata (RNG states, counters) is stored as a JSON string whose
UTF-8 bytes are written one per f32 value under a ``meta/`` name.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RPDB"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    records = dict(arrays)
    if meta is not None:
        raw = json.dumps(meta, sort_keys=True).encode("utf-8")
        records["meta/json"] = np.frombuffer(raw, dtype=np.uint8).astype(np.float32)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr)
        bname = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(bname)))
        chunks.append(bname)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict | None]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape).copy()
        off += 4 * n
    if off != len(buf):
        raise CheckpointError(f"{path}: trailing bytes")
    meta = None
    if "meta/json" in arrays:
        raw = arrays.pop("meta/json").astype(np.uint8).tobytes()
        meta = json.loads(raw.decode("utf-8"))
    return arrays, meta
