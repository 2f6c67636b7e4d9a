"""Little-endian tensor container used for checkpoints and feature files.

Layout::

    magic      8 bytes   b"BSITENS\\0"
    version    u32
    meta_len   u64
    meta       meta_len bytes of UTF-8 JSON (sorted keys)
    count      u32
    count x tensor:
        name_len u16, name (UTF-8)
        dtype    u8   (1 float32, 2 float64, 3 int64)
        rank     u8
        shape    rank x u64
        data     C-order little-endian raw values
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"BSITENS\0"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_TAGS = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}


def save_container(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks += [struct.pack("<Q", len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise DataError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        tag = _TAGS[arr.dtype]
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_bytes)) + name_bytes)
        chunks.append(struct.pack("<BB", tag, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"container not found: {path}")
    buf = path.read_bytes()
    if buf[:8] != MAGIC:
        raise DataError(f"{path} is not a tensor container (bad magic)")
    try:
        (version,) = struct.unpack_from("<I", buf, 8)
        if version != VERSION:
            raise DataError(f"{path}: unsupported container version {version}")
        (meta_len,) = struct.unpack_from("<Q", buf, 12)
        pos = 20
        meta = json.loads(buf[pos : pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + name_len].decode("utf-8")
            pos += name_len
            tag, rank = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            dtype = _DTYPES[tag]
            n = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + n > len(buf):
                raise DataError(f"{path}: truncated data for tensor {name!r}")
            tensors[name] = np.frombuffer(buf, dtype=dtype, count=n // dtype.itemsize, offset=pos).reshape(shape).astype(dtype.newbyteorder("="))
            pos += n
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt tensor container ({exc})") from exc
    return meta, tensors
