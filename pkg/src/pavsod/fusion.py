"""Audio-visual context fusion: student and teacher blocks.

Visual features T×C×H×W are flattened to tokens (time-major, then row-major
pixels), given the spherical positional encoding, and attend to the acoustic
embedding tokens in two parallel cross-attention layers (semantic and
location). A sigmoid of a C→1 projection of the location output gates the
semantic output pixel-wise. The teacher repeats the structure with its own
weights after absorbing a downsampled ground-truth channel; its inputs are
cut from the graph so no loss on it reaches the encoders.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .acoustic.seld import AcousticEmbeddings
from .geometry import sinusoidal_pe_1d
from .layers import AttentionLayer
from .tensor import Tensor, ops, stop_gradient
from .tensor.nn import Linear, Module, param

log = logging.getLogger(__name__)


def flatten_clip(f: Tensor) -> Tensor:
    """T×C×H×W → C×(T·H·W); element (t, c, h, w) lands at column t·H·W + h·W + w."""
    t, c, h, w = f.shape
    return ops.reshape(ops.transpose(f, (1, 0, 2, 3)), (c, t * h * w))


def unflatten_clip(flat: Tensor, t: int, h: int, w: int) -> Tensor:
    c = flat.shape[0]
    return ops.transpose(ops.reshape(flat, (c, t, h, w)), (1, 0, 2, 3))


def clip_tokens(f: Tensor) -> Tensor:
    """T×C×H×W → (T·H·W)×C, the transpose of :func:`flatten_clip`."""
    return ops.transpose(flatten_clip(f), (1, 0))


def tokens_to_clip(tokens: Tensor, t: int, h: int, w: int) -> Tensor:
    return unflatten_clip(ops.transpose(tokens, (1, 0)), t, h, w)


@dataclass
class FusionOutput:
    f_stu: Tensor
    f_tch: Tensor | None = None
    gate: Tensor | None = None  # student location weighting, T×1×H×W

    def __post_init__(self):
        if self.f_tch is not None and self.f_tch.shape != self.f_stu.shape:
            raise ValueError(f"student {self.f_stu.shape} and teacher {self.f_tch.shape} shapes differ")


class ConcatMixer(Module):
    """Ablation stand-in for cross-attention: mean audio token broadcast to every pixel, concatenated, 1×1 projection."""

    def __init__(self, rng: np.random.Generator, c: int, c_e: int):
        self.proj = Linear(rng, c + c_e, c)

    def __call__(self, x: Tensor, ctx: Tensor) -> Tensor:
        pooled = ops.mean(ctx, axis=0, keepdims=True)
        ones = Tensor(np.ones((x.shape[0], 1), dtype=x.dtype))
        return ops.relu(self.proj(ops.concat([x, ops.matmul(ones, pooled)], axis=1)))


class AcfBlock(Module):
    """One fusion block with semantic and location branches.

    Args:
        c: visual channels (the model width).
        c_e: acoustic embedding channels.
        heads: attention heads per branch.
        with_gt: add the ground-truth adapter (teacher).
        concat: use :class:`ConcatMixer` instead of cross-attention.
        loc_branch: set False to drop the location branch and its gate.
    """

    def __init__(self, rng: np.random.Generator, c: int, c_e: int, heads: int = 4, ffn_mult: int = 2,
                 with_gt: bool = False, concat: bool = False, loc_branch: bool = True):
        def branch():
            return ConcatMixer(rng, c, c_e) if concat else AttentionLayer(rng, c, c_e, heads, ffn_mult)

        self.sem = branch()
        self.loc = branch() if loc_branch else None
        self.gate = Linear(rng, c, 1) if loc_branch else None
        if with_gt:
            w = np.zeros((c + 1, c))
            w[:c] = np.eye(c)
            w[c] = rng.normal(0.0, 1.0, size=c)
            self.adapter_w = param(w)
            self.adapter_b = param(np.zeros(c))
        else:
            self.adapter_w = self.adapter_b = None
        self._c = c

    @property
    def takes_gt(self) -> bool:
        return self.adapter_w is not None

    def __call__(self, f: Tensor, emb: AcousticEmbeddings, spe: np.ndarray,
                 gt: Tensor | None = None) -> FusionOutput:
        t, c, h, w = f.shape
        if spe.shape != (h, w, c):
            raise ValueError(f"SPE table {spe.shape} does not match features {(h, w, c)}")
        tokens = clip_tokens(f)
        if self.takes_gt:
            if gt is None:
                raise ValueError("the teacher block needs ground-truth masks")
            tokens = ops.linear(ops.concat([tokens, clip_tokens(gt)], axis=1), self.adapter_w, self.adapter_b)
        pe = np.tile(spe.reshape(1, h * w, c), (t, 1, 1)).reshape(t * h * w, c)
        tokens = tokens + Tensor(pe, dtype=f.dtype)
        g_pe = Tensor(sinusoidal_pe_1d(emb.length, emb.channels).astype(f.dtype))
        g_sem = ops.transpose(emb.g_sem, (1, 0)) + g_pe
        f_sem = self.sem(tokens, g_sem)
        if self.loc is None:
            return FusionOutput(tokens_to_clip(f_sem, t, h, w))
        g_loc = ops.transpose(emb.g_loc, (1, 0)) + g_pe
        weight = ops.sigmoid(self.gate(self.loc(tokens, g_loc)))
        out = tokens_to_clip(f_sem * weight, t, h, w)
        return FusionOutput(out, gate=tokens_to_clip(weight, t, h, w))


def downsample_masks(gt: Tensor, h: int, w: int) -> Tensor:
    """Average-pool T×1×H_gt×W_gt masks to T×1×h×w soft occupancy."""
    sh, sw = gt.shape[2] // h, gt.shape[3] // w
    if sh * h != gt.shape[2] or sw * w != gt.shape[3]:
        raise ValueError(f"mask size {gt.shape[2:]} is not a multiple of feature size {(h, w)}")
    return ops.pool(ops.pool(gt, "avg", sh, 2), "avg", sw, 3)


def teacher_inputs(f: Tensor, emb: AcousticEmbeddings) -> tuple[Tensor, AcousticEmbeddings]:
    """Cut the graph so the teacher's losses never reach the encoders."""
    return stop_gradient(f), AcousticEmbeddings(stop_gradient(emb.g_sem), stop_gradient(emb.g_loc))


def fuse(f: Tensor, emb: AcousticEmbeddings, spe: np.ndarray, student: AcfBlock,
         teacher: AcfBlock | None = None, mode: str = "infer", gt: Tensor | None = None) -> FusionOutput:
    """Student always; teacher only when ``mode == "train"`` and a teacher exists."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    out = student(f, emb, spe)
    if mode == "infer":
        if gt is not None:
            log.warning("ground truth passed in infer mode is ignored")
        return out
    if teacher is None:
        return out
    if gt is None:
        raise ValueError("train mode needs ground-truth masks for the teacher")
    f_sg, emb_sg = teacher_inputs(f, emb)
    gt_small = downsample_masks(gt, f.shape[2], f.shape[3])
    tch = teacher(f_sg, emb_sg, spe, gt=gt_small)
    return FusionOutput(out.f_stu, tch.f_stu, out.gate)
