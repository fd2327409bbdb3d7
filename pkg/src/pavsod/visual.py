"""Per-frame conv backbone, transformer over the deepest level, temporal non-local
aggregation, and the top-down (FPN) mask decoder.

Frames are processed as a batch: every tensor here is laid out T×C×H×W.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import ErGrid, build_spe_table, sinusoidal_pe_1d
from .layers import AttentionLayer
from .tensor import Tensor, ops
from .tensor.nn import Conv2d, Linear, Module, zeros


@dataclass(frozen=True)
class VisualConfig:
    widths: tuple[int, ...] = (16, 32, 64, 96)
    transformer_layers: int = 3
    heads: int = 4
    ffn_mult: int = 2
    fpn_width: int = 32
    transformer_spe: bool = False
    final_upsample: str = "bilinear"
    logit_stride: int = 4

    def __post_init__(self):
        levels = [2 ** (i + 1) for i in range(len(self.widths))]
        if self.logit_stride not in levels[:-1]:
            raise ValueError(f"logit_stride must be one of {levels[:-1]}, got {self.logit_stride}")

    @property
    def stride(self) -> int:
        return 2 ** len(self.widths)

    @property
    def channels(self) -> int:
        return self.widths[-1]


class Backbone(Module):
    """Stages of (3×3 conv stride 2, ReLU, 3×3 conv, ReLU); level ``l`` has stride 2^(l+1)."""

    def __init__(self, rng: np.random.Generator, widths=(16, 32, 64, 96), in_channels: int = 3):
        self.stages = []
        c_in = in_channels
        for c in widths:
            self.stages.append([Conv2d(rng, c_in, c, 3, stride=2), Conv2d(rng, c, c, 3)])
            c_in = c
        self._depth = len(widths)

    def check_input(self, frames: Tensor) -> None:
        if frames.ndim != 4 or frames.shape[1] != 3:
            raise ValueError(f"frames must be T×3×H×W, got {frames.shape}")
        h, w = frames.shape[2:]
        mult = 2 ** self._depth
        if w != 2 * h:
            raise ValueError(f"frames must be 2:1 equirectangular, got {w}x{h}")
        if h % mult or w % mult:
            raise ValueError(f"frame size {w}x{h} is not divisible by the backbone stride {mult}")

    def __call__(self, frames: Tensor) -> list[Tensor]:
        self.check_input(frames)
        levels = []
        x = frames
        for down, conv in self.stages:
            x = ops.relu(conv(ops.relu(down(x))))
            levels.append(x)
        return levels

    def named_parameters(self, prefix: str = ""):
        for i, (down, conv) in enumerate(self.stages):
            yield from down.named_parameters(f"{prefix}stages.{i}.down.")
            yield from conv.named_parameters(f"{prefix}stages.{i}.conv.")


class TransformerEncoder(Module):
    def __init__(self, rng: np.random.Generator, d: int, n_layers: int, n_heads: int, ffn_mult: int = 2):
        if d % n_heads:
            raise ValueError(f"width {d} is not divisible by {n_heads} heads")
        self.layers = [AttentionLayer(rng, d, d, n_heads, ffn_mult) for _ in range(n_layers)]

    def __call__(self, tokens: Tensor) -> Tensor:
        for layer in self.layers:
            tokens = layer(tokens)
        return tokens


def to_tokens(x: Tensor) -> Tensor:
    """T×C×H×W → T×(H·W)×C."""
    t, c, h, w = x.shape
    return ops.transpose(ops.reshape(x, (t, c, h * w)), (0, 2, 1))


def from_tokens(tokens: Tensor, h: int, w: int) -> Tensor:
    t, s, c = tokens.shape
    return ops.reshape(ops.transpose(tokens, (0, 2, 1)), (t, c, h, w))


class TemporalNonLocal(Module):
    """Embedded-Gaussian non-local block over all T·H·W positions, residual form.

    ``y = x + softmax(θ(x) φ(x)ᵀ / √d) g(x) W_out`` with ``W_out`` starting at
    zero, so a freshly built block is the identity.
    """

    def __init__(self, rng: np.random.Generator, c: int, inner: int | None = None):
        inner = inner or max(1, c // 2)
        self.theta = Linear(rng, c, inner)
        self.phi = Linear(rng, c, inner)
        self.g = Linear(rng, c, inner)
        self.out_w = zeros((inner, c))
        self.out_b = zeros((c,))

    def __call__(self, x: Tensor) -> Tensor:
        t, c, h, w = x.shape
        seq = ops.reshape(to_tokens(x), (t * h * w, c))
        th, ph = self.theta(seq), self.phi(seq)
        attn = ops.softmax(ops.matmul(th, ops.transpose(ph, (1, 0))) * (1.0 / math.sqrt(th.shape[-1])), axis=-1)
        y = ops.linear(ops.matmul(attn, self.g(seq)), self.out_w, self.out_b)
        return from_tokens(ops.reshape(seq + y, (t, h * w, c)), h, w)


def raster_pe(h: int, w: int, d: int) -> np.ndarray:
    """1D sinusoid over raster order, h·w × d."""
    return sinusoidal_pe_1d(h * w, d)


class VisualEncoder(Module):
    """Frames T×3×H×W → (post-temporal features T×C×h×w, backbone levels)."""

    def __init__(self, config: VisualConfig, rng: np.random.Generator):
        self._config = config
        self.backbone = Backbone(rng, config.widths)
        self.transformer = TransformerEncoder(rng, config.channels, config.transformer_layers,
                                              config.heads, config.ffn_mult)
        self.temporal = TemporalNonLocal(rng, config.channels)

    def __call__(self, frames: Tensor) -> tuple[Tensor, list[Tensor]]:
        levels = self.backbone(frames)
        deep = levels[-1]
        _, c, h, w = deep.shape
        if self._config.transformer_spe:
            pe = build_spe_table(ErGrid(w), c).reshape(h * w, c)
        else:
            pe = raster_pe(h, w, c)
        tokens = to_tokens(deep) + Tensor(pe, dtype=deep.dtype)
        f = from_tokens(self.transformer(tokens), h, w)
        return self.temporal(f), levels


class FpnDecoder(Module):
    """Top-down pathway from the fused deepest map through every backbone skip
    down to ``logit_stride`` (default: the stride-8 and stride-4 levels);
    1-channel logits at that stride, upsampled to frame size.
    """

    def __init__(self, rng: np.random.Generator, config: VisualConfig):
        w = config.widths
        d = config.fpn_width
        self._config = config
        self.top = Conv2d(rng, w[-1], d, 1)
        self._first_skip = config.logit_stride.bit_length() - 2
        self.laterals = [Conv2d(rng, w[i], d, 1) for i in range(len(w) - 2, self._first_skip - 1, -1)]
        self.smooth = [Conv2d(rng, d, d, 3) for _ in self.laterals]
        self.head = Conv2d(rng, d, 1, 1)

    def __call__(self, fused: Tensor, levels: list[Tensor]) -> Tensor:
        skips = levels[self._first_skip:-1][::-1]
        if len(skips) != len(self.laterals):
            raise ValueError(f"decoder expects {len(self.laterals)} skip levels, got {len(skips)}")
        p = self.top(fused)
        for skip, lat, smooth in zip(skips, self.laterals, self.smooth):
            up = ops.upsample_nearest(p, 2)
            if up.shape[-2:] != skip.shape[-2:]:
                raise ValueError(f"skip of size {skip.shape[-2:]} does not match upsampled {up.shape[-2:]}")
            p = ops.relu(smooth(lat(skip) + up))
        logits = self.head(p)
        f = self._config.logit_stride
        if self._config.final_upsample == "nearest":
            return ops.upsample_nearest(logits, f)
        return ops.upsample_bilinear(logits, f)

    def named_parameters(self, prefix: str = ""):
        yield from self.top.named_parameters(prefix + "top.")
        for i, (lat, sm) in enumerate(zip(self.laterals, self.smooth)):
            yield from lat.named_parameters(f"{prefix}lateral.{i}.")
            yield from sm.named_parameters(f"{prefix}smooth.{i}.")
        yield from self.head.named_parameters(prefix + "head.")
