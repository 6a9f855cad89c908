"""HCKP parameter checkpoints.

Layout (little-endian): ``b"HCKP"``, version ``u32``, then until end of file
one record per array: name length ``u16``, UTF-8 name, rank ``u8``, each dim
``u32``, float64 payload.
"""

from __future__ import annotations

import struct

import numpy as np

from ..errors import CorruptFile, IoFailure

MAGIC = b"HCKP"
VERSION = 1


def save_checkpoint(arrays: dict[str, np.ndarray], path) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(chunks))
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc


def load_checkpoint(path) -> dict[str, np.ndarray]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise CorruptFile(f"{path}: not an HCKP checkpoint")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CorruptFile(f"{path}: unsupported HCKP version {version}")
    out = {}
    pos = 8
    try:
        while pos < len(raw):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > len(raw):
                raise CorruptFile(f"{path}: record {name!r} is truncated")
            out[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(dims).copy()
            pos += 8 * count
    except struct.error as exc:
        raise CorruptFile(f"{path}: truncated record header") from exc
    return out
