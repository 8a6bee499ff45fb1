"""CTF1 tensor container.

Layout: ``b"CTF1"``, little-endian u32 ndim, ndim x u32 dims, u8 dtype code
(0 = u16, 1 = f32, 2 = f64), then the raw row-major payload.
"""

import os
import struct

import numpy as np

from .errors import CorruptionError, DataError, ResolutionError

MAGIC = b"CTF1"
CODES = {0: np.dtype("<u2"), 1: np.dtype("<f4"), 2: np.dtype("<f8")}
_BY_DTYPE = {v.newbyteorder("="): k for k, v in CODES.items()}


def encode(arr):
    arr = np.asarray(arr)
    code = _BY_DTYPE.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise DataError(f"CTF1 cannot store dtype {arr.dtype}")
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    head += struct.pack("<B", code)
    return head + np.ascontiguousarray(arr, dtype=CODES[code]).tobytes()


def decode(buf, source="<bytes>"):
    if len(buf) < 9 or buf[:4] != MAGIC:
        raise CorruptionError(f"{source}: not a CTF1 file")
    (ndim,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 4 * ndim
    if len(buf) < off + 1:
        raise CorruptionError(f"{source}: truncated header")
    dims = struct.unpack_from(f"<{ndim}I", buf, 8)
    code = buf[off]
    if code not in CODES:
        raise CorruptionError(f"{source}: unknown dtype code {code}")
    dt = CODES[code]
    n = int(np.prod(dims, dtype=np.int64))
    body = buf[off + 1:]
    if len(body) != n * dt.itemsize:
        raise CorruptionError(
            f"{source}: payload has {len(body)} bytes, expected {n * dt.itemsize}"
        )
    return np.frombuffer(body, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def save(path, arr):
    data = encode(arr)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return data


def load(path):
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except FileNotFoundError:
        raise ResolutionError(path, "tensor file") from None
    return decode(buf, str(path))
