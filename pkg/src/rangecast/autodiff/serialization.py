"""PCFM parameter files: a named float32 tensor table plus a JSON trailer.

Layout (little-endian)::

    b"PCFM" | u8 version | u32 count
    count x ( u16 name_len | name utf-8 | u8 rank | rank x u32 dim | float32 payload )
    u32 meta_len | meta_len bytes of JSON
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"PCFM"
VERSION = 1


def save_tensors(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    chunks = [MAGIC, struct.pack("<BI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4", order="C")
        key = name.encode()
        chunks.append(struct.pack("<H", len(key)))
        chunks.append(key)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    chunks.append(struct.pack("<I", len(blob)))
    chunks.append(blob)
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a PCFM parameter file")
    version, count = struct.unpack_from("<BI", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported PCFM version {version}")
    pos = 9
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + n].decode()
        pos += n
        (rank,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * size
    (meta_len,) = struct.unpack_from("<I", raw, pos)
    meta = json.loads(raw[pos + 4:pos + 4 + meta_len].decode() or "{}")
    return out, meta
