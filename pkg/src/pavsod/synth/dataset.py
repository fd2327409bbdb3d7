"""Clip directories on disk and the tab-separated dataset manifest.

Each clip directory holds ``frame_<t>.ppm``, ``mask_<t>.pgm``, ``audio.wav``
(float-32, omitted for audio-free datasets) and ``meta.txt``. The manifest
has one line per clip: ``directory  class  seed  split``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..acoustic.audio_io import read_wav, write_wav
from .imageio import read_pgm, read_ppm, write_pgm, write_ppm
from .render import ClipSample, SceneParams, random_scene, render_clip

MANIFEST = "manifest.txt"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    class_id: int
    seed: int
    split: str


def split_of(seed: int) -> str:
    return "train" if seed % 2 == 0 else "val"


def save_clip(clip: ClipSample, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for t in range(clip.n_frames):
        write_ppm(d / f"frame_{t}.ppm", clip.frames[t])
        write_pgm(d / f"mask_{t}.pgm", clip.masks[t])
    if clip.audio is not None:
        write_wav(d / "audio.wav", clip.audio)
    lines = [f"class = {clip.class_id}", f"seed = {clip.seed}", f"frames = {clip.n_frames}"]
    lines += [f"doa_{t} = " + " ".join(repr(float(x)) for x in clip.doa_truth[t]) for t in range(clip.n_frames)]
    (d / "meta.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return d


def _read_meta(path: Path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise DatasetError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_clip(entry) -> ClipSample:
    """Load a clip from a :class:`ManifestEntry` or a clip directory."""
    d = Path(entry.path if isinstance(entry, ManifestEntry) else entry)
    if not (d / "meta.txt").exists():
        raise FileNotFoundError(f"{d}: no meta.txt; not a clip directory")
    meta = _read_meta(d / "meta.txt")
    try:
        n = int(meta["frames"])
        doa = np.array([[float(x) for x in meta[f"doa_{t}"].split()] for t in range(n)])
        class_id, seed = int(meta["class"]), int(meta["seed"])
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"{d / 'meta.txt'}: malformed metadata ({exc})") from exc
    frames = np.stack([read_ppm(d / f"frame_{t}.ppm") for t in range(n)])
    masks = np.stack([read_pgm(d / f"mask_{t}.pgm") for t in range(n)])
    audio = read_wav(d / "audio.wav") if (d / "audio.wav").exists() else None
    return ClipSample(frames, masks, audio, doa, class_id, seed, name=d.name)


def make_dataset(n_clips: int, out, seed: int = 0, params: SceneParams = SceneParams(),
                 audio: str = "ambisonic") -> list[ManifestEntry]:
    """Render ``n_clips`` clips with seeds ``seed, seed+1, …`` and write the manifest.

    ``audio`` is ``"ambisonic"``, ``"mono"`` (omni replicated on all four
    channels) or ``"none"``. Even seeds go to the train split, odd to val.
    """
    if n_clips < 1:
        raise ValueError("need at least one clip")
    if audio not in ("ambisonic", "mono", "none"):
        raise ValueError(f"unknown audio mode {audio!r}")
    root = Path(out)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset directory {root}: {exc}") from exc
    entries = []
    for i in range(n_clips):
        s = seed + i
        clip = render_clip(random_scene(s, params))
        if audio == "mono":
            clip = replace(clip, audio=clip.audio.mono())
        elif audio == "none":
            clip = replace(clip, audio=None)
        name = f"clip_{i:04d}"
        save_clip(clip, root / name)
        entries.append(ManifestEntry(root / name, clip.class_id, s, split_of(s)))
    text = "".join(f"{e.path.name}\t{e.class_id}\t{e.seed}\t{e.split}\n" for e in entries)
    (root / MANIFEST).write_text(text, encoding="utf-8")
    return entries


def read_manifest(path) -> list[ManifestEntry]:
    """Parse a manifest file (or the manifest inside a dataset directory)."""
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST
    if not p.exists():
        raise FileNotFoundError(f"manifest not found: {p}")
    out = []
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DatasetError(f"{p}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        try:
            out.append(ManifestEntry(p.parent / parts[0], int(parts[1]), int(parts[2]), parts[3]))
        except ValueError as exc:
            raise DatasetError(f"{p}:{lineno}: {exc}") from exc
    return out
