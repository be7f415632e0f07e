"""Flat binary parameter container.

Layout (all integers little-endian uint32 unless noted)::

    magic   b"SPLK"
    version
    count
    count x { name_len, name (utf-8), rank, dims (uint64 each), data (<f8) }
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SPLK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(params: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        chunks.append(np.ascontiguousarray(a).tobytes())
    return b"".join(chunks)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    off = 4
    if len(buf) < 12:
        raise CheckpointError(f"truncated checkpoint header: {len(buf)} of 12 bytes")
    version, count = struct.unpack_from("<II", buf, off)
    off += 8
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            if off + nlen > len(buf):
                raise CheckpointError(f"truncated record name: need {nlen} bytes, have {len(buf) - off}")
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            n = int(np.prod(dims)) if rank else 1
            nbytes = 8 * n
            if off + nbytes > len(buf):
                raise CheckpointError(f"truncated record {name!r}: need {nbytes} bytes, "
                                      f"have {len(buf) - off}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(dims).astype(np.float64)
            off += nbytes
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    return out


def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(params))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
