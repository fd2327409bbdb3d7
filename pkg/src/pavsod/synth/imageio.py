"""Binary netpbm images: P6 (RGB) and P5 (grey), 8-bit, with byte-offset diagnostics."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _encode(magic: bytes, arr: np.ndarray) -> bytes:
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr, dtype=np.uint8).tobytes()


def write_ppm(path, rgb: np.ndarray) -> None:
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"PPM needs an H×W×3 uint8 array, got {rgb.shape} {rgb.dtype}")
    Path(path).write_bytes(_encode(b"P6", rgb))


def write_pgm(path, grey: np.ndarray) -> None:
    if grey.ndim != 2 or grey.dtype != np.uint8:
        raise ValueError(f"PGM needs an H×W uint8 array, got {grey.shape} {grey.dtype}")
    Path(path).write_bytes(_encode(b"P5", grey))


def _header(buf: bytes, name: str) -> tuple[list[int], int]:
    """Parse width, height, maxval after the magic; returns them and the pixel offset."""
    fields: list[int] = []
    i = 2
    while len(fields) < 3:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if i < len(buf) and buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(buf) and buf[i:i + 1].isdigit():
            i += 1
        if start == i:
            what = "end of file" if i >= len(buf) else f"byte {buf[i:i + 1]!r}"
            raise ImageFormatError(f"{name}: header field {len(fields) + 1} expected at byte offset {start}, found {what}")
        fields.append(int(buf[start:i]))
    if i >= len(buf) or not buf[i:i + 1].isspace():
        raise ImageFormatError(f"{name}: missing whitespace after header at byte offset {i}")
    return fields, i + 1


def _read(path, magic: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    name = str(path)
    if buf[:2] != magic:
        raise ImageFormatError(f"{name}: expected magic {magic.decode()} at byte offset 0, found {buf[:2]!r}")
    (w, h, maxval), off = _header(buf, name)
    if maxval != 255:
        raise ImageFormatError(f"{name}: only 8-bit images (maxval 255) are supported, got {maxval}")
    need = w * h * channels
    have = len(buf) - off
    if have < need:
        raise ImageFormatError(
            f"{name}: truncated pixel data at byte offset {len(buf)}: expected {need} bytes from offset {off}, got {have}")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off)
    return data.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def read_ppm(path) -> np.ndarray:
    return _read(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read(path, b"P5", 1)
