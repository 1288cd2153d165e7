"""Versioned binary archive of named float64 arrays.

Layout (little-endian)::

    b"WLT1"  u32 version
    repeated until end of file:
        u32 name_length  name (UTF-8)  u32 rank  u64 extents[rank]  f64 data[prod(extents)]

Training state is stored under name prefixes: ``param/``, ``adam_m/``,
``adam_v/``, ``ema/`` and scalars under ``meta/``.
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"WLT1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, a in arrays.items():
        a = np.asarray(a, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack(f"<I{a.ndim}Q", a.ndim, *a.shape))
        parts.append(np.ascontiguousarray(a).tobytes())
    return b"".join(parts)


def decode(raw: bytes) -> dict[str, np.ndarray]:
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 8:
        raise CheckpointError("truncated checkpoint header")
    (ver,) = struct.unpack_from("<I", raw, 4)
    if ver != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {ver}")
    off, out = 8, {}
    while off < len(raw):
        try:
            (n,) = struct.unpack_from("<I", raw, off)
            if off + 4 + n > len(raw):
                raise CheckpointError("record name truncated")
            name = raw[off + 4 : off + 4 + n].decode("utf-8")
            off += 4 + n
            (rank,) = struct.unpack_from("<I", raw, off)
            shape = struct.unpack_from(f"<{rank}Q", raw, off + 4)
            off += 4 + 8 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if off + 8 * count > len(raw):
                raise CheckpointError(f"record {name!r} truncated")
            out[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
            off += 8 * count
        except struct.error as e:
            raise CheckpointError(f"truncated checkpoint at byte {off}") from e
    return out


def save(path, arrays: Mapping[str, np.ndarray]) -> None:
    """Write atomically: a crash mid-write leaves the previous file intact."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode(arrays))
    os.replace(tmp, path)


def load(path) -> dict[str, np.ndarray]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        return decode(fh.read())


def split(arrays: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    """Records under ``prefix/`` with the prefix removed."""
    p = prefix + "/"
    return {k[len(p) :]: v for k, v in arrays.items() if k.startswith(p)}
