"""HFGT tensor files.

Layout: ``b"HFGT"``, version byte 0x01, dtype byte (0x01 float64,
0x02 uint16), ndim byte, ndim little-endian uint32 dims, then the row-major
little-endian payload.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"HFGT"
VERSION = 1
_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<u2")}
_CODES = {np.dtype("float64"): 1, np.dtype("uint16"): 2}


class HFGTError(ValueError):
    pass


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise HFGTError(f"HFGT stores float64 or uint16, got {arr.dtype}")
    if arr.ndim > 255:
        raise HFGTError("too many dimensions")
    head = MAGIC + bytes([VERSION, code, arr.ndim])
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def read(stream) -> np.ndarray:
    head = stream.read(7)
    if len(head) < 7 or head[:4] != MAGIC:
        raise HFGTError("not an HFGT record (bad magic)")
    version, code, ndim = head[4], head[5], head[6]
    if version != VERSION:
        raise HFGTError(f"unsupported HFGT version {version}")
    if code not in _DTYPES:
        raise HFGTError(f"unknown HFGT dtype code {code}")
    dims = struct.unpack(f"<{ndim}I", stream.read(4 * ndim))
    dt = _DTYPES[code]
    count = int(np.prod(dims)) if ndim else 1
    payload = stream.read(count * dt.itemsize)
    if len(payload) != count * dt.itemsize:
        raise HFGTError("truncated HFGT payload")
    return np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def decode(blob: bytes) -> np.ndarray:
    return read(io.BytesIO(blob))


def save(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode(arr))


def load(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read(fh)
