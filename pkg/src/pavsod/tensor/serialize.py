"""Binary tensor container.

Single tensor ("PAVT")::

    b"PAVT" | u8 version=1 | u8 dtype (0=f32, 1=f64) | u8 rank | u64 dims... | raw LE values

Named collections ("PAVC") wrap an index of UTF-8 names around PAVT blobs,
preceded by a free-text metadata block::

    b"PAVC" | u8 version=1 | u32 meta_len | meta bytes | u32 count
    then per entry: u16 name_len | name | u64 blob_len | PAVT blob
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"PAVT"
COLLECTION_MAGIC = b"PAVC"
VERSION = 1
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def encode_array(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}; only float32/float64 are stored")
    code = _CODES[arr.dtype]
    head = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_array(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one PAVT blob at ``offset``; returns the array and the end offset."""
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError(f"bad magic at byte {offset}: {buf[offset:offset + 4]!r}")
    if len(buf) < offset + 7:
        raise FormatError(f"truncated header at byte {offset}")
    version, code, rank = struct.unpack_from("<BBB", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    pos = offset + 7
    if len(buf) < pos + 8 * rank:
        raise FormatError(f"truncated dims at byte {pos}")
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    dt = _DTYPES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(buf) < pos + nbytes:
        raise FormatError(f"truncated payload at byte {pos}: need {nbytes} bytes")
    arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True), pos + nbytes


def save_tensor(path, arr) -> None:
    data = getattr(arr, "data", arr)
    Path(path).write_bytes(encode_array(np.asarray(data)))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_array(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after tensor")
    return arr


def encode_collection(tensors: Mapping[str, np.ndarray], meta: str = "") -> bytes:
    out = io.BytesIO()
    _write_collection(out, tensors, meta)
    return out.getvalue()


def _write_collection(fh: BinaryIO, tensors: Mapping[str, np.ndarray], meta: str) -> None:
    mb = meta.encode("utf-8")
    fh.write(COLLECTION_MAGIC + struct.pack("<B", VERSION))
    fh.write(struct.pack("<I", len(mb)) + mb)
    fh.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        blob = encode_array(np.asarray(getattr(arr, "data", arr)))
        fh.write(struct.pack("<H", len(nb)) + nb)
        fh.write(struct.pack("<Q", len(blob)) + blob)


def decode_collection(buf: bytes) -> tuple[dict[str, np.ndarray], str]:
    if buf[:4] != COLLECTION_MAGIC:
        raise FormatError(f"bad collection magic {buf[:4]!r}")
    (version,) = struct.unpack_from("<B", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported collection version {version}")
    pos = 5
    try:
        (mlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        meta = buf[pos:pos + mlen].decode("utf-8")
        pos += mlen
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (blen,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            arr, end = decode_array(buf[pos:pos + blen])
            if end != blen:
                raise FormatError(f"entry {name!r} length mismatch")
            tensors[name] = arr
            pos += blen
    except struct.error as exc:
        raise FormatError(f"truncated collection near byte {pos}") from exc
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after collection")
    return tensors, meta


def save_collection(path, tensors: Mapping[str, np.ndarray], meta: str = "") -> None:
    Path(path).write_bytes(encode_collection(tensors, meta))


def load_collection(path) -> tuple[dict[str, np.ndarray], str]:
    return decode_collection(Path(path).read_bytes())
