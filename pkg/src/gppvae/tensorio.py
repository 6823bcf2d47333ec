"""Binary tensor container (``.gpt``).

Layout: magic ``b"GPT1"``, one ``u8`` dtype code (0 = float32,
1 = float64), one ``u8`` ndim, ``ndim`` little-endian ``u64`` extents,
then the raw little-endian values in row-major order.
"""

import struct

import numpy as np

MAGIC = b"GPT1"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class TensorFormatError(ValueError):
    pass


def to_bytes(arr):
    arr = np.asarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
            arr = arr.astype(np.float64)
        else:
            raise TensorFormatError(f"unsupported dtype {arr.dtype}")
    code = _DTYPE_CODES[arr.dtype]
    if arr.ndim > 255:
        raise TensorFormatError("too many dimensions")
    head = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()


def from_bytes(buf):
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise TensorFormatError("bad magic; not a GPT1 tensor")
    code, ndim = struct.unpack_from("<BB", buf, 4)
    if code not in _CODES:
        raise TensorFormatError(f"unknown dtype code {code}")
    offset = 6 + 8 * ndim
    if len(buf) < offset:
        raise TensorFormatError("truncated header")
    shape = struct.unpack_from(f"<{ndim}Q", buf, 6)
    dtype = _CODES[code]
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    if len(buf) - offset != count * dtype.itemsize:
        raise TensorFormatError(
            f"payload has {len(buf) - offset} bytes, expected {count * dtype.itemsize} for shape {shape}")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def save(path, arr):
    with open(path, "wb") as fh:
        fh.write(to_bytes(arr))


def load(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
