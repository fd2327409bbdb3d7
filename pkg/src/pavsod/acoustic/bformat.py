"""First-order ambisonic (B-format) synthesis and intensity-based DOA."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SQRT_HALF = 1.0 / np.sqrt(2.0)


@dataclass
class AmbisonicClip:
    """Four equal-length B-format channels in (W, X, Y, Z) order."""

    channels: np.ndarray
    sample_rate: int

    def __post_init__(self):
        ch = np.asarray(self.channels)
        if ch.ndim != 2 or ch.shape[0] != 4:
            raise ValueError(f"ambisonic clips need exactly 4 channels, got array of shape {ch.shape}")
        self.channels = ch

    @property
    def length(self) -> int:
        return self.channels.shape[1]

    def segment(self, start: int, stop: int) -> "AmbisonicClip":
        return AmbisonicClip(self.channels[:, start:stop], self.sample_rate)

    def mono(self) -> "AmbisonicClip":
        """Collapse to the omni channel replicated four times (no spatial cue)."""
        w = self.channels[0]
        return AmbisonicClip(np.stack([w, w, w, w]), self.sample_rate)


def _check_unit(direction) -> np.ndarray:
    d = np.asarray(direction, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ValueError(f"source direction must be unit-norm, |d| = {np.linalg.norm(d):.6g}")
    return d


def bformat_gains(direction) -> np.ndarray:
    d = _check_unit(direction)
    return np.array([SQRT_HALF, d[0], d[1], d[2]])


def encode_bformat(direction, signal, sample_rate: int = 8000) -> AmbisonicClip:
    """Pan a mono ``signal`` to ``direction``: W = s/√2, X = s·dx, Y = s·dy, Z = s·dz."""
    s = np.asarray(signal)
    gains = bformat_gains(direction).astype(s.dtype if s.dtype.kind == "f" else np.float64)
    return AmbisonicClip(gains[:, None] * s[None, :], sample_rate)


def add_noise(clip: AmbisonicClip, snr_db: float, rng: np.random.Generator) -> AmbisonicClip:
    """Independent white noise per channel at ``snr_db`` below the omni-normalized source power."""
    w = clip.channels[0].astype(np.float64)
    src_power = 2.0 * np.mean(w * w)
    sigma = np.sqrt(src_power / 10.0 ** (snr_db / 10.0))
    noisy = clip.channels + rng.normal(0.0, sigma, size=clip.channels.shape)
    return AmbisonicClip(noisy.astype(clip.channels.dtype), clip.sample_rate)


def intensity_vector(channels: np.ndarray) -> np.ndarray:
    c = np.asarray(channels, dtype=np.float64)
    w = c[0]
    return np.array([np.mean(w * c[1]), np.mean(w * c[2]), np.mean(w * c[3])])


def doa_oracle(clip) -> np.ndarray | None:
    """Direction of the time-averaged active intensity ``mean(W·[X, Y, Z])``.

    For a single first-order source this is the maximizer of the spatial
    energy over directions. Returns ``None`` when the clip carries no
    intensity (silence).
    """
    channels = clip.channels if isinstance(clip, AmbisonicClip) else clip
    i = intensity_vector(channels)
    n = np.linalg.norm(i)
    power = float(np.mean(np.square(np.asarray(channels, dtype=np.float64))))
    if power == 0.0 or not np.isfinite(n) or n <= 1e-12 * power:
        return None
    return i / n


def spatial_energy(channels: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Mean power of a first-order beam steered to each of ``directions`` (K×3)."""
    c = np.asarray(channels, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    weights = np.concatenate([np.full((d.shape[0], 1), SQRT_HALF), d], axis=1)
    beams = weights @ c
    return np.mean(beams * beams, axis=1)


def random_directions(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)
