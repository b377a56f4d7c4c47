"""P23D checkpoint segments.

Layout (little-endian)::

    b"P23D"  u32 version  u32 header_len  header (UTF-8 JSON)
    u32 count
    count x [u32 name_len, name, u32 rank, rank x u32 dim, float32 payload]

Version 1 always carries a JSON header; it may be ``{}``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"P23D"
VERSION = 1


class FormatError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray], header: dict | None = None) -> bytes:
    head = json.dumps(header or {}, sort_keys=True, separators=(",", ":")).encode()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(head)), head, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        nb = name.encode()
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if buf[:4] != MAGIC:
        raise FormatError("not a P23D file (bad magic)")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise FormatError("truncated P23D file")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, hlen = take("<II")
    if version != VERSION:
        raise FormatError(f"unsupported P23D version {version}")
    if pos + hlen > len(buf):
        raise FormatError("truncated P23D header")
    try:
        header = json.loads(buf[pos:pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt P23D header: {exc}") from None
    pos += hlen
    (count,) = take("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims, dtype=np.int64))
        if pos + 4 * n > len(buf):
            raise FormatError(f"truncated payload for {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).astype(np.float64).reshape(dims)
        pos += 4 * n
    if pos != len(buf):
        raise FormatError("trailing bytes after last tensor")
    return out, header


def save(path, tensors: dict[str, np.ndarray], header: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, header))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
