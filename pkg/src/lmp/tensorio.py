"""LMPT binary tensor files.

Layout::

    b"LMPT" | u8 version=1 | u8 dtype=1 (f32 LE) | u8 rank | u8 pad
    rank x u64 LE dims
    raw little-endian float32 payload, row-major

Writes are atomic: data goes to a temporary file in the destination
directory and is renamed into place.
"""
import os
import struct
import tempfile

import numpy as np

from .errors import FormatError

MAGIC = b"LMPT"
VERSION = 1
DTYPE_F32 = 1
_HEADER = struct.Struct("<4sBBBx")


def encode(array):
    arr = np.asarray(array)
    if not np.all(np.isfinite(arr)):
        raise FormatError("refusing to serialize non-finite values")
    arr = np.require(arr.astype("<f4", copy=False), requirements="C")
    head = _HEADER.pack(MAGIC, VERSION, DTYPE_F32, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + dims + arr.tobytes()


def decode(buf):
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, dtype, rank = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}")
    off = _HEADER.size
    if len(buf) < off + 8 * rank:
        raise FormatError("truncated dims")
    shape = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) - off != 4 * count:
        raise FormatError(f"payload is {len(buf) - off} bytes, expected {4 * count}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).copy()


def atomic_write_bytes(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, array):
    atomic_write_bytes(path, encode(array))


def load(path):
    with open(path, "rb") as fh:
        return decode(fh.read())
