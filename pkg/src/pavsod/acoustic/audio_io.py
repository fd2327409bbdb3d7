"""Four-channel audio files: WAV (PCM16 / float32) and raw f32 with a text sidecar."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .bformat import AmbisonicClip


class AudioFormatError(ValueError):
    pass


def write_wav(path, clip: AmbisonicClip, pcm16: bool = False) -> None:
    data = np.asarray(clip.channels).T
    if pcm16:
        data = np.clip(np.rint(data * 32767.0), -32768, 32767).astype(np.int16)
    else:
        data = data.astype(np.float32)
    wavfile.write(str(path), int(clip.sample_rate), np.ascontiguousarray(data))


def read_wav(path) -> AmbisonicClip:
    try:
        rate, data = wavfile.read(str(path))
    except ValueError as exc:
        raise AudioFormatError(f"{path}: {exc}") from exc
    if data.ndim != 2 or data.shape[1] != 4:
        got = 1 if data.ndim == 1 else data.shape[1]
        raise AudioFormatError(f"{path}: expected 4 channels, found {got}")
    if data.dtype == np.int16:
        chans = data.T.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        chans = data.T.copy()
    else:
        raise AudioFormatError(f"{path}: unsupported sample type {data.dtype}; use PCM16 or float32")
    return AmbisonicClip(np.ascontiguousarray(chans), int(rate))


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".hdr")


def write_raw(path, clip: AmbisonicClip) -> None:
    path = Path(path)
    np.ascontiguousarray(clip.channels.T, dtype="<f4").tofile(path)
    _sidecar(path).write_text(
        f"rate = {clip.sample_rate}\nchannels = 4\nlength = {clip.length}\n", encoding="utf-8")


def read_raw(path) -> AmbisonicClip:
    path = Path(path)
    hdr: dict[str, int] = {}
    for lineno, line in enumerate(_sidecar(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise AudioFormatError(f"{_sidecar(path)}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        hdr[k] = int(v)
    for key in ("rate", "channels", "length"):
        if key not in hdr:
            raise AudioFormatError(f"{_sidecar(path)}: missing '{key}'")
    if hdr["channels"] != 4:
        raise AudioFormatError(f"{path}: expected 4 channels, header says {hdr['channels']}")
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != 4 * hdr["length"]:
        raise AudioFormatError(f"{path}: {raw.size} samples on disk, header implies {4 * hdr['length']}")
    chans = raw.reshape(hdr["length"], 4).T.astype(np.float32)
    return AmbisonicClip(np.ascontiguousarray(chans), hdr["rate"])


def read_audio(path) -> AmbisonicClip:
    path = Path(path)
    if _sidecar(path).exists():
        return read_raw(path)
    return read_wav(path)
