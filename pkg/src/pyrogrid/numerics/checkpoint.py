"""Binary parameter checkpoints ("PGCK").

Layout (little-endian): magic ``PGCK``, u16 version (=1), then records until
end of file, each ``u16 name_len, name (UTF-8), u8 rank, u32 dims[rank],
float64 payload``.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import BadMagic, TruncatedFile, VersionMismatch

MAGIC = b"PGCK"
VERSION = 1


def encode_checkpoint(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION)]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 6:
        raise TruncatedFile("checkpoint shorter than its header")
    if buf[:4] != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, found {buf[:4]!r}")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, reader supports {VERSION}")
    out: dict[str, np.ndarray] = {}
    pos = 6

    def take(n: int) -> int:
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedFile(f"record at byte {pos} needs {n} bytes, {len(buf) - pos} left")
        start = pos
        pos += n
        return start

    while pos < len(buf):
        (nlen,) = struct.unpack_from("<H", buf, take(2))
        name = buf[take(nlen):pos].decode("utf-8")
        (rank,) = struct.unpack_from("<B", buf, take(1))
        dims = struct.unpack_from(f"<{rank}I", buf, take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        start = take(8 * count)
        out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=start).reshape(dims).astype(np.float64)
    return out


def save_checkpoint(arrays: Mapping[str, np.ndarray], path) -> None:
    Path(path).write_bytes(encode_checkpoint(arrays))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())
