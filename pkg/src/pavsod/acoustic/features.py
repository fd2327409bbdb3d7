"""Magnitude/phase spectrogram features for multichannel audio."""

from __future__ import annotations

import numpy as np

from .bformat import AmbisonicClip


def hamming(m: int) -> np.ndarray:
    """Periodic Hamming window of length ``m``."""
    n = np.arange(m)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * n / m)


def n_frames(length: int, m: int) -> int:
    return (length - m) // (m // 2) + 1


def frame_signal(x: np.ndarray, m: int) -> np.ndarray:
    hop = m // 2
    count = n_frames(x.shape[-1], m)
    idx = np.arange(m)[None, :] + hop * np.arange(count)[:, None]
    return x[..., idx]


def stft_features(clip: AmbisonicClip, m: int = 256) -> np.ndarray:
    """T_a × (M/2) × 2C features: C magnitude planes followed by C phase planes.

    M-point DFT of Hamming-windowed frames with hop M/2; bins 1..M/2 are kept
    (the zeroth bin is dropped). Phases lie in (-π, π]; silent bins get 0.
    """
    if m < 2 or m & (m - 1):
        raise ValueError(f"DFT size must be a power of two, got {m}")
    x = np.asarray(clip.channels, dtype=np.float64)
    if x.shape[1] < m:
        raise ValueError(f"clip of {x.shape[1]} samples is shorter than one {m}-sample window")
    frames = frame_signal(x, m) * hamming(m)
    spec = np.fft.rfft(frames, n=m, axis=-1)[..., 1:m // 2 + 1]
    mag = np.abs(spec)
    phase = np.angle(spec)
    phase[phase <= -np.pi] = np.pi
    phase[mag == 0] = 0.0
    feats = np.concatenate([mag, phase], axis=0)
    return np.ascontiguousarray(feats.transpose(1, 2, 0))


def spectral_energy(features: np.ndarray, m: int) -> float:
    """Energy implied by the kept bins, via Parseval for a real M-point DFT.

    Interior bins count twice (negative-frequency mirror); the Nyquist bin
    once. The dropped zeroth bin is absent from the total.
    """
    c = features.shape[-1] // 2
    mag2 = np.square(features[..., :c])
    total = 2.0 * mag2[:, :-1].sum() + mag2[:, -1].sum()
    return float(total / m)


def windowed_energy(clip: AmbisonicClip, m: int) -> float:
    frames = frame_signal(np.asarray(clip.channels, dtype=np.float64), m) * hamming(m)
    return float(np.square(frames).sum())


def hamming_energy_factor(m: int) -> float:
    """Mean of the squared window; scales raw energy to windowed energy."""
    return float(np.mean(np.square(hamming(m))))
