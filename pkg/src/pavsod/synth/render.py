"""Procedural panoramic clips: a moving sound-emitting disc among silent distractors."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..acoustic.bformat import AmbisonicClip, encode_bformat
from ..acoustic.seld import class_signal
from ..geometry import ErGrid, pixel_directions

# RGB at full brightness; the class of a disc is readable from its colour
CLASS_COLOURS = np.array([[235.0, 110.0, 60.0], [70.0, 150.0, 235.0]])


@dataclass(frozen=True)
class SceneParams:
    """Distribution a scene is drawn from."""

    width: int = 64
    frames: int = 3
    radius: float = 0.6
    n_distractors: int = 2
    distractor_brightness: float = 0.6
    motion: float = 0.15  # radians per frame along a great circle
    max_abs_z: float = 0.6  # keep trajectories off the poles
    sample_rate: int = 8000
    samples_per_frame: int = 2000
    noise_floor: float = 1e-3
    n_classes: int = 2

    @classmethod
    def ambiguous(cls, **kw) -> "SceneParams":
        """Distractors as bright as the object and nearly no motion: vision alone cannot pick it."""
        base = dict(distractor_brightness=1.0, motion=0.03)
        base.update(kw)
        return cls(**base)


@dataclass(frozen=True)
class Distractor:
    direction: tuple[float, float, float]
    class_id: int
    brightness: float


@dataclass(frozen=True)
class SceneSpec:
    width: int
    trajectory: np.ndarray  # T×3 unit vectors
    radius: float
    class_id: int
    seed: int
    distractors: tuple[Distractor, ...] = ()
    sample_rate: int = 8000
    samples_per_frame: int = 2000
    noise_floor: float = 1e-3
    amplitude: float = 0.6

    def __post_init__(self):
        traj = np.asarray(self.trajectory, dtype=np.float64).reshape(-1, 3)
        if np.any(np.abs(np.linalg.norm(traj, axis=1) - 1.0) > 1e-9):
            raise ValueError("trajectory directions must be unit-norm")
        if not 0 < self.radius < np.pi / 4:
            raise ValueError(f"object radius must lie in (0, π/4), got {self.radius}")
        object.__setattr__(self, "trajectory", traj)

    @property
    def height(self) -> int:
        return self.width // 2

    @property
    def frames(self) -> int:
        return self.trajectory.shape[0]


@dataclass
class ClipSample:
    frames: np.ndarray  # T×H×W×3 uint8
    masks: np.ndarray  # T×H×W uint8, 255 = salient
    audio: AmbisonicClip | None
    doa_truth: np.ndarray  # T×3
    class_id: int
    seed: int = 0
    name: str = field(default="")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def frames_float(self) -> np.ndarray:
        """T×3×H×W in [0, 1]."""
        return self.frames.transpose(0, 3, 1, 2).astype(np.float64) / 255.0

    def masks_float(self) -> np.ndarray:
        """T×1×H×W in {0, 1}."""
        return (self.masks[:, None] > 127).astype(np.float64)

    def equals(self, other: "ClipSample") -> bool:
        """Bitwise equality of every array plus labels."""
        same_audio = (self.audio is None) == (other.audio is None)
        if same_audio and self.audio is not None:
            same_audio = (self.audio.sample_rate == other.audio.sample_rate
                          and self.audio.channels.dtype == other.audio.channels.dtype
                          and np.array_equal(self.audio.channels, other.audio.channels))
        return (same_audio and self.class_id == other.class_id
                and np.array_equal(self.frames, other.frames)
                and np.array_equal(self.masks, other.masks)
                and self.doa_truth.tobytes() == other.doa_truth.tobytes())


def _random_unit(rng: np.random.Generator, max_abs_z: float) -> np.ndarray:
    while True:
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        if abs(v[2]) <= max_abs_z:
            return v


def _great_circle(start: np.ndarray, rng: np.random.Generator, step: float, n: int) -> np.ndarray:
    axis = np.cross(start, rng.normal(size=3))
    axis /= np.linalg.norm(axis)
    tangent = np.cross(axis, start)
    ang = step * np.arange(n)
    pts = np.cos(ang)[:, None] * start + np.sin(ang)[:, None] * tangent
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def random_scene(seed: int, params: SceneParams = SceneParams()) -> SceneSpec:
    rng = np.random.default_rng(seed)
    class_id = int(rng.integers(params.n_classes))
    traj = _great_circle(_random_unit(rng, params.max_abs_z), rng, params.motion, params.frames)
    clearance = np.cos(2 * params.radius + 0.15)
    distractors: list[Distractor] = []
    taken = [*traj]
    while len(distractors) < params.n_distractors:
        d = _random_unit(rng, params.max_abs_z)
        if all(float(d @ p) < clearance for p in taken):
            distractors.append(Distractor(tuple(float(x) for x in d), int(rng.integers(params.n_classes)),
                                          params.distractor_brightness))
            taken.append(d)
    return SceneSpec(params.width, traj, params.radius, class_id, seed, tuple(distractors),
                     params.sample_rate, params.samples_per_frame, params.noise_floor,
                     float(rng.uniform(0.4, 0.9)))


def disc_mask(grid: ErGrid, direction, radius: float) -> np.ndarray:
    """Pixels whose centre direction is within ``radius`` of ``direction`` (H×W bool)."""
    dirs = pixel_directions(grid)
    return dirs @ np.asarray(direction, dtype=np.float64) >= np.cos(radius)


def render_audio(spec: SceneSpec, rng: np.random.Generator) -> AmbisonicClip:
    n = spec.samples_per_frame
    s = spec.amplitude * class_signal(spec.class_id, n * spec.frames, spec.sample_rate, rng)
    chans = np.concatenate([encode_bformat(spec.trajectory[t], s[t * n:(t + 1) * n], spec.sample_rate).channels
                            for t in range(spec.frames)], axis=1)
    if spec.noise_floor:
        chans = chans + rng.normal(0.0, spec.noise_floor, size=chans.shape)
    return AmbisonicClip(chans.astype(np.float32), spec.sample_rate)


def render_clip(spec: SceneSpec) -> ClipSample:
    """Frames, masks, audio and per-frame DOA, fully determined by ``spec``."""
    rng = np.random.default_rng([spec.seed, 7])
    grid = ErGrid(spec.width)
    h, w = grid.height, grid.width
    distractor_masks = [(disc_mask(grid, d.direction, spec.radius), d) for d in spec.distractors]
    frames = np.empty((spec.frames, h, w, 3), dtype=np.uint8)
    masks = np.empty((spec.frames, h, w), dtype=np.uint8)
    for t in range(spec.frames):
        img = 45.0 + rng.uniform(-12.0, 12.0, size=(h, w, 1)) * np.ones(3)
        for m, d in distractor_masks:
            img[m] = d.brightness * CLASS_COLOURS[d.class_id]
        obj = disc_mask(grid, spec.trajectory[t], spec.radius)
        img[obj] = CLASS_COLOURS[spec.class_id]
        frames[t] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        masks[t] = np.where(obj, 255, 0).astype(np.uint8)
    audio = render_audio(spec, rng)
    return ClipSample(frames, masks, audio, spec.trajectory.copy(), spec.class_id, spec.seed)


def with_mono_audio(clip: ClipSample) -> ClipSample:
    return replace(clip, audio=None if clip.audio is None else clip.audio.mono())
