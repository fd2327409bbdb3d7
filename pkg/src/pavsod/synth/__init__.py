"""Synthetic panoramic audio-visual clips and their on-disk format."""

from .dataset import DatasetError, ManifestEntry, load_clip, make_dataset, read_manifest, save_clip, split_of
from .imageio import ImageFormatError, read_pgm, read_ppm, write_pgm, write_ppm
from .render import ClipSample, Distractor, SceneParams, SceneSpec, disc_mask, random_scene, render_clip

__all__ = [
    "ClipSample",
    "DatasetError",
    "Distractor",
    "ImageFormatError",
    "ManifestEntry",
    "SceneParams",
    "SceneSpec",
    "disc_mask",
    "load_clip",
    "make_dataset",
    "random_scene",
    "read_manifest",
    "read_pgm",
    "read_ppm",
    "render_clip",
    "save_clip",
    "split_of",
    "write_pgm",
    "write_ppm",
]
