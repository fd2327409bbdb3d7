"""Equirectangular grid to unit-sphere mapping and sinusoidal positional encodings.

A pixel at column ``u`` and row ``v`` of a W×H equirectangular frame sits at
longitude ``u / R`` and colatitude ``v / R`` with ``R = W / (2π)``; the frame
must be exactly 2:1 so that colatitude sweeps ``[0, π]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class ErGrid:
    width: int
    height: int = field(default=0)

    def __post_init__(self):
        if self.width <= 0 or self.width % 2:
            raise ValueError(f"ER width must be a positive even integer, got {self.width}")
        if self.height == 0:
            object.__setattr__(self, "height", self.width // 2)
        if self.height * 2 != self.width:
            raise ValueError(f"ER frames must be 2:1, got {self.width}x{self.height}")

    @property
    def radius(self) -> float:
        return self.width / (2.0 * math.pi)


def er_to_sphere(grid: ErGrid, u, v):
    """Map ER coordinates (scalars or arrays) to (x, y, z) on the unit sphere.

    ``u`` may equal ``W`` exactly (the wrap column) and ``v`` spans ``[0, H]``.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any(u < 0) or np.any(u > grid.width) or np.any(v < 0) or np.any(v > grid.height):
        raise ValueError(f"coordinates outside the {grid.width}x{grid.height} ER domain")
    r = grid.radius
    lon, colat = u / r, v / r
    s = np.sin(colat)
    x, y, z = s * np.cos(lon), s * np.sin(lon), np.cos(colat)
    if x.ndim == 0:
        return float(x), float(y), float(z)
    return x, y, z


def sphere_to_er(grid: ErGrid, direction) -> tuple[float, float]:
    """Continuous ER coordinates of a unit direction (inverse of :func:`er_to_sphere`)."""
    x, y, z = (float(c) for c in direction)
    colat = math.acos(max(-1.0, min(1.0, z)))
    lon = math.atan2(y, x) % (2 * math.pi)
    return lon * grid.radius, colat * grid.radius


def pixel_directions(grid: ErGrid) -> np.ndarray:
    """H×W×3 unit vectors through pixel centers ``(u + 0.5, v + 0.5)``."""
    vv, uu = np.meshgrid(np.arange(grid.height) + 0.5, np.arange(grid.width) + 0.5, indexing="ij")
    x, y, z = er_to_sphere(grid, uu, vv)
    return np.stack([x, y, z], axis=-1)


def _frequencies(n_pairs: int, block: int) -> np.ndarray:
    # divisor 10000^(2i / block) for i = 0 .. n_pairs-1
    return 10000.0 ** (2.0 * np.arange(n_pairs) / block)


def spe(coord, d: int) -> np.ndarray:
    """Spherical positional encoding of one or many 3-D coordinates.

    Each of x, y, z gets a block of ``d/3`` entries; inside a block, entries
    ``2i`` and ``2i+1`` are ``sin`` and ``cos`` of ``pos / 10000^(2i/(d/3))``.
    Blocks are concatenated in x, y, z order. ``coord`` has trailing size 3.
    """
    if d <= 0 or d % 6:
        raise ValueError(f"SPE dimension must be a positive multiple of 6, got {d}")
    c = np.asarray(coord, dtype=np.float64)
    if c.shape[-1] != 3:
        raise ValueError(f"coordinates need a trailing axis of size 3, got {c.shape}")
    block = d // 3
    div = _frequencies(block // 2, block)
    out = np.empty(c.shape[:-1] + (d,), dtype=np.float64)
    for axis in range(3):
        arg = c[..., axis, None] / div
        base = axis * block
        out[..., base:base + block:2] = np.sin(arg)
        out[..., base + 1:base + block:2] = np.cos(arg)
    return out


def sinusoidal_pe_1d(length: int, d: int) -> np.ndarray:
    """Standard transformer table (L×d): sin at even, cos at odd columns."""
    if d <= 0 or d % 2:
        raise ValueError(f"1-D positional encoding needs an even positive dimension, got {d}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    div = _frequencies(d // 2, d)
    out = np.empty((length, d), dtype=np.float64)
    out[:, 0::2] = np.sin(pos / div)
    out[:, 1::2] = np.cos(pos / div)
    return out


@lru_cache(maxsize=32)
def _spe_table_cached(width: int, d: int) -> np.ndarray:
    table = spe(pixel_directions(ErGrid(width)), d)
    table.setflags(write=False)
    return table


def build_spe_table(grid: ErGrid, d: int) -> np.ndarray:
    """H×W×d SPE of every pixel center; cached per (resolution, d)."""
    return _spe_table_cached(grid.width, d)


def angular_distance(a, b) -> np.ndarray:
    """Angle in radians between unit vectors along the trailing axis."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dot = np.sum(a * b, axis=-1)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    return np.arccos(np.clip(dot / (na * nb), -1.0, 1.0))


def spe_ppm(table: np.ndarray) -> np.ndarray:
    """H×W×3 uint8 rendering of the first three SPE channels ([-1, 1] → [0, 255])."""
    rgb = (table[..., :3] + 1.0) * 127.5
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
