"""Binary persistence: ARFT tensor files and ARFC checkpoint bundles.

ARFT layout::

    0..3   b"ARFT"
    4      version (1)
    5      dtype code (0 = float32, 1 = float64)
    6      rank r
    7..    r little-endian uint32 extents, then row-major little-endian values

ARFC layout::

    0..3   b"ARFC"
    4      version (1)
    5..36  32-byte configuration hash
    37..40 little-endian uint32 count of named tensors
    then per tensor: uint16 name length, UTF-8 name, embedded ARFT record
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Mapping, Union

import numpy as np

from .errors import FormatError

TENSOR_MAGIC = b"ARFT"
CHECKPOINT_MAGIC = b"ARFC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

PathLike = Union[str, Path]


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype not in _CODES:
        raise FormatError(f"ARFT stores float32/float64 only, got {array.dtype}")
    if array.ndim > 255:
        raise FormatError("ARFT rank is limited to 255")
    code = _CODES[array.dtype]
    header = TENSOR_MAGIC + bytes([VERSION, code, array.ndim])
    extents = struct.pack(f"<{array.ndim}I", *array.shape)
    return header + extents + np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()


def read_tensor(stream: BinaryIO) -> np.ndarray:
    head = stream.read(7)
    if len(head) != 7 or head[:4] != TENSOR_MAGIC:
        raise FormatError("missing ARFT magic")
    version, code, rank = head[4], head[5], head[6]
    if version != VERSION:
        raise FormatError(f"unsupported ARFT version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown ARFT dtype code {code}")
    raw = stream.read(4 * rank)
    if len(raw) != 4 * rank:
        raise FormatError("truncated ARFT extents")
    shape = struct.unpack(f"<{rank}I", raw)
    dtype = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    body = stream.read(count * dtype.itemsize)
    if len(body) != count * dtype.itemsize:
        raise FormatError("truncated ARFT payload")
    return np.frombuffer(body, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def decode_tensor(data: bytes) -> np.ndarray:
    stream = io.BytesIO(data)
    array = read_tensor(stream)
    if stream.read(1):
        raise FormatError("trailing bytes after ARFT record")
    return array


def save_tensor(path: PathLike, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path: PathLike) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def encode_checkpoint(tensors: Mapping[str, np.ndarray], config_hash: bytes) -> bytes:
    if len(config_hash) != 32:
        raise FormatError("config hash must be exactly 32 bytes")
    out = [CHECKPOINT_MAGIC, bytes([VERSION]), config_hash, struct.pack("<I", len(tensors))]
    for name, array in tensors.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(encode_tensor(array))
    return b"".join(out)


def decode_checkpoint(data: bytes) -> tuple:
    """Return ``(tensors, config_hash)`` with tensors in file order."""
    stream = io.BytesIO(data)
    if stream.read(4) != CHECKPOINT_MAGIC:
        raise FormatError("missing ARFC magic")
    version = stream.read(1)
    if not version or version[0] != VERSION:
        raise FormatError("unsupported ARFC version")
    config_hash = stream.read(32)
    if len(config_hash) != 32:
        raise FormatError("truncated ARFC header")
    raw_count = stream.read(4)
    if len(raw_count) != 4:
        raise FormatError("truncated ARFC header")
    (count,) = struct.unpack("<I", raw_count)
    tensors = {}
    for _ in range(count):
        raw_len = stream.read(2)
        if len(raw_len) != 2:
            raise FormatError("truncated ARFC entry")
        (name_len,) = struct.unpack("<H", raw_len)
        raw_name = stream.read(name_len)
        if len(raw_name) != name_len:
            raise FormatError("truncated ARFC tensor name")
        try:
            name = raw_name.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("ARFC tensor name is not valid UTF-8") from None
        tensors[name] = read_tensor(stream)
    if stream.read(1):
        raise FormatError("trailing bytes after ARFC bundle")
    return tensors, config_hash


def save_checkpoint(path: PathLike, tensors: Mapping[str, np.ndarray], config_hash: bytes) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors, config_hash))


def load_checkpoint(path: PathLike) -> tuple:
    return decode_checkpoint(Path(path).read_bytes())
