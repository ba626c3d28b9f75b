"""Binary parameter checkpoints ("PQCK").

Layout (little-endian)::

    b"PQCK" | version u32 | header_len u32 | header JSON (utf-8)
    repeated until EOF:
        name_len u16 | name utf-8 | rank u8 | extents u32[rank]
        | precision u8 (0=f32, 1=f64) | raw values
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"PQCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], header: dict | None = None) -> None:
    head = json.dumps(header or {}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(head)), head]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype == np.float64:
            tag = 1
        else:
            tag, arr = 0, arr.astype(np.float32)
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", tag))
        parts.append(arr.astype(_DTYPES[tag], copy=False).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, arrays)``."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a PQCK checkpoint")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    header = json.loads(buf[pos:pos + hlen].decode())
    pos += hlen
    arrays: dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode()
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            (tag,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dt = _DTYPES[tag]
            count = int(np.prod(shape)) if rank else 1
            nbytes = count * dt.itemsize
            if pos + nbytes > len(buf):
                raise CheckpointError(f"{path}: truncated payload for '{name}'")
            arrays[name] = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    return header, arrays
