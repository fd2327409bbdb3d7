"""CRNN sound-event localization and detection encoder.

Three conv layers (3×3 kernels across all magnitude/phase planes, per-channel
scale/shift, ReLU, frequency max-pool) reduce the frequency axis to 2; two
bidirectional GRU layers model time; two parallel heads of three linear
layers end in N sigmoid units (detection) and 3N tanh units (direction).
The penultimate activations of the heads are the semantic and location
embeddings handed to the fusion stage.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..tensor import Tensor, backward, no_grad, ops
from ..tensor.nn import Conv2d, Linear, Module, glorot, ones, zeros
from ..tensor.optim import AdamW
from .bformat import AmbisonicClip, encode_bformat, random_directions
from .features import n_frames, stft_features

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SeldConfig:
    n_channels: int = 4
    dft_size: int = 256
    filters: int = 16
    pools: tuple[int, ...] = (8, 4, 2)
    gru_width: int = 32
    fc_width: int = 64
    n_classes: int = 2

    def __post_init__(self):
        if len(self.pools) != 3:
            raise ValueError("the encoder has exactly three conv layers; give three pool sizes")
        if int(np.prod(self.pools)) * 2 != self.dft_size // 2:
            raise ValueError(
                f"pools {self.pools} must reduce {self.dft_size // 2} frequency bins to 2")


@dataclass
class SeldOutput:
    hidden: Tensor
    sed_logits: Tensor
    sed: Tensor
    doa: Tensor
    emb_sem: Tensor
    emb_loc: Tensor


@dataclass
class AcousticEmbeddings:
    """Semantic and location embeddings, each C_e × L (channels × audio frames)."""

    g_sem: Tensor
    g_loc: Tensor

    def __post_init__(self):
        if self.g_sem.shape != self.g_loc.shape:
            raise ValueError(f"embedding shapes differ: {self.g_sem.shape} vs {self.g_loc.shape}")

    @property
    def channels(self) -> int:
        return self.g_sem.shape[0]

    @property
    def length(self) -> int:
        return self.g_sem.shape[1]


class _BiGru(Module):
    def __init__(self, rng, d_in: int, q: int):
        self.fw_w = glorot(rng, d_in, 3 * q, (d_in, 3 * q))
        self.fw_u = glorot(rng, q, 3 * q, (q, 3 * q))
        self.fw_b = zeros((3 * q,))
        self.bw_w = glorot(rng, d_in, 3 * q, (d_in, 3 * q))
        self.bw_u = glorot(rng, q, 3 * q, (q, 3 * q))
        self.bw_b = zeros((3 * q,))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.gru_bidirectional(x, (self.fw_w, self.fw_u, self.fw_b),
                                     (self.bw_w, self.bw_u, self.bw_b))


class _Head(Module):
    def __init__(self, rng, d_in: int, width: int, d_out: int):
        self.fc1 = Linear(rng, d_in, width)
        self.fc2 = Linear(rng, width, width)
        self.fc3 = Linear(rng, width, d_out)

    def __call__(self, h: Tensor) -> tuple[Tensor, Tensor]:
        emb = ops.relu(self.fc2(self.fc1(h)))
        return emb, self.fc3(emb)


class SeldEncoder(Module):
    def __init__(self, config: SeldConfig = SeldConfig(), seed: int = 0):
        rng = np.random.default_rng(seed)
        c = config
        self._config = c
        planes = 2 * c.n_channels
        self.convs = [Conv2d(rng, planes if i == 0 else c.filters, c.filters, 3, bias=False)
                      for i in range(3)]
        self.scales = [ones((c.filters, 1, 1)) for _ in range(3)]
        self.shifts = [zeros((c.filters, 1, 1)) for _ in range(3)]
        self.gru1 = _BiGru(rng, 2 * c.filters, c.gru_width)
        self.gru2 = _BiGru(rng, 2 * c.gru_width, c.gru_width)
        self.sed_head = _Head(rng, 2 * c.gru_width, c.fc_width, c.n_classes)
        self.doa_head = _Head(rng, 2 * c.gru_width, c.fc_width, 3 * c.n_classes)

    @property
    def config(self) -> SeldConfig:
        return self._config

    def prepare(self, features: np.ndarray) -> Tensor:
        """Map T_a × F × 2C features to 2C × T_a × F network input.

        Magnitudes are compressed with log1p and the omni phase is scaled to
        (-1, 1]. Each dipole phase plane is replaced by the normalized active
        intensity |X_c|·cos(φ_c − φ_0) / (√2·|X_0|), clipped to [-1, 1]: for a
        single panned source this equals the direction component in every bin
        the source occupies, and it does not wrap the way raw phase does.
        """
        c = self._config.n_channels
        f = np.asarray(features, dtype=np.float64)
        mag, ph = f[..., :c], f[..., c:]
        ref = np.sqrt(2.0) * mag[..., :1]
        ratio = np.divide(mag[..., 1:], ref, out=np.zeros_like(mag[..., 1:]), where=ref > 0)
        rel = np.clip(ratio * np.cos(ph[..., 1:] - ph[..., :1]), -1.0, 1.0)
        x = np.concatenate([np.log1p(mag), ph[..., :1] / np.pi, rel], axis=-1)
        return Tensor(x.transpose(2, 0, 1))

    def forward(self, features) -> SeldOutput:
        x = features if isinstance(features, Tensor) else self.prepare(features)
        for conv, scale, shift, pool in zip(self.convs, self.scales, self.shifts, self._config.pools):
            x = ops.relu(conv(x) * scale + shift)
            x = ops.pool(x, "max", pool, 2)
        p, t, f = x.shape
        seq = ops.reshape(ops.transpose(x, (1, 0, 2)), (t, p * f))
        h = self.gru2(self.gru1(seq))
        emb_sem, sed_logits = self.sed_head(h)
        emb_loc, doa_raw = self.doa_head(h)
        return SeldOutput(h, sed_logits, ops.sigmoid(sed_logits), ops.tanh(doa_raw), emb_sem, emb_loc)

    __call__ = forward

    def embeddings(self, features) -> AcousticEmbeddings:
        out = self.forward(features)
        return AcousticEmbeddings(ops.transpose(out.emb_sem, (1, 0)), ops.transpose(out.emb_loc, (1, 0)))


def extract_embeddings(clip_or_features, encoder: SeldEncoder) -> AcousticEmbeddings:
    feats = clip_or_features
    if isinstance(clip_or_features, AmbisonicClip):
        feats = stft_features(clip_or_features, encoder.config.dft_size)
    return encoder.embeddings(feats)


def sed_decision(sed) -> np.ndarray:
    """Event activity: strictly above 0.5."""
    return np.asarray(getattr(sed, "data", sed)) > 0.5


# ---------------------------------------------------------------------------
# synthetic localization/detection data


@dataclass
class SeldExample:
    features: np.ndarray
    sed_target: np.ndarray
    doa_target: np.ndarray
    direction: np.ndarray
    class_id: int


def class_signal(class_id: int, n: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-RMS source waveform: class 0 is a pure tone, class 1 white noise."""
    if class_id == 0:
        freq = rng.uniform(300.0, 2000.0)
        t = np.arange(n) / sample_rate
        s = np.sqrt(2.0) * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    elif class_id == 1:
        s = rng.normal(size=n)
        s /= np.sqrt(np.mean(s * s))
    else:
        raise ValueError(f"unknown sound class {class_id}")
    return s


def frame_activity(active: np.ndarray, m: int) -> np.ndarray:
    """Per-STFT-frame label: at least half the window's samples active."""
    hop = m // 2
    count = n_frames(active.size, m)
    cov = np.array([active[i * hop:i * hop + m].mean() for i in range(count)])
    return cov >= 0.5


def make_seld_example(rng: np.random.Generator, class_id: int, config: SeldConfig,
                      length: int = 6000, sample_rate: int = 8000, noise_floor: float = 1e-3) -> SeldExample:
    direction = random_directions(rng, 1)[0]
    amp = rng.uniform(0.3, 1.0)
    dur = int(rng.uniform(0.4, 0.9) * length)
    onset = int(rng.integers(0, length - dur + 1))
    s = np.zeros(length)
    s[onset:onset + dur] = amp * class_signal(class_id, dur, sample_rate, rng)
    clip = encode_bformat(direction, s, sample_rate)
    chans = clip.channels + rng.normal(0.0, noise_floor, size=clip.channels.shape)
    feats = stft_features(AmbisonicClip(chans, sample_rate), config.dft_size)
    active = np.zeros(length, dtype=bool)
    active[onset:onset + dur] = True
    act = frame_activity(active, config.dft_size)
    sed = np.zeros((act.size, config.n_classes))
    sed[act, class_id] = 1.0
    doa = np.zeros((act.size, 3 * config.n_classes))
    doa[act, 3 * class_id:3 * class_id + 3] = direction
    return SeldExample(feats, sed, doa, direction, class_id)


def make_seld_dataset(n_per_class: int, config: SeldConfig, seed: int, **kw) -> list[SeldExample]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_per_class):
        for cls in range(config.n_classes):
            out.append(make_seld_example(rng, cls, config, **kw))
    return out


def augment_example(ex: SeldExample, rng: np.random.Generator) -> SeldExample:
    """Apply a random signed permutation of the X/Y/Z axes.

    Permuting dipole channels permutes the source direction; negating one
    shifts its phase by π. Magnitudes and the omni channel are untouched.
    """
    perm = rng.permutation(3)
    signs = rng.choice([-1.0, 1.0], size=3)
    c = ex.features.shape[-1] // 2
    f = ex.features.copy()
    for dst, src in enumerate(perm):
        f[..., 1 + dst] = ex.features[..., 1 + src]
        ph = ex.features[..., c + 1 + src]
        if signs[dst] < 0:
            ph = np.where(ph > 0, ph - np.pi, ph + np.pi)
            ph[ex.features[..., 1 + src] == 0] = 0.0
        f[..., c + 1 + dst] = ph
    direction = signs * ex.direction[perm]
    n = ex.sed_target.shape[1]
    doa = ex.doa_target.reshape(-1, n, 3)[:, :, perm] * signs
    return SeldExample(f, ex.sed_target, doa.reshape(-1, 3 * n), direction, ex.class_id)


def seld_loss(out: SeldOutput, ex: SeldExample) -> Tensor:
    """Detection BCE plus direction MSE restricted to active (frame, class) slots."""
    bce = ops.bce_with_logits(out.sed_logits, ex.sed_target).mean()
    mask = np.repeat(ex.sed_target, 3, axis=1)
    n_active = max(1.0, float(mask.sum()))
    diff = (out.doa - Tensor(ex.doa_target)) * Tensor(mask)
    return bce + (diff * diff).sum() / n_active


def evaluate_seld(encoder: SeldEncoder, examples: Sequence[SeldExample]) -> dict[str, float]:
    """Frame-level SED accuracy (all classes correct) and median DOA error on active frames."""
    correct = total = 0
    errors = []
    with no_grad():
        for ex in examples:
            out = encoder(ex.features)
            pred = sed_decision(out.sed)
            truth = ex.sed_target > 0.5
            correct += int(np.all(pred == truth, axis=1).sum())
            total += truth.shape[0]
            doa = out.doa.data
            for t, c in zip(*np.nonzero(truth)):
                v = doa[t, 3 * c:3 * c + 3].astype(np.float64)
                nv = np.linalg.norm(v)
                cosang = float(v @ ex.direction / nv) if nv > 0 else -1.0
                errors.append(np.degrees(np.arccos(np.clip(cosang, -1, 1))))
    return {
        "sed_accuracy": correct / max(total, 1),
        "doa_median_deg": float(np.median(errors)) if errors else float("nan"),
    }


def pretrain_seld(
    examples: Sequence[SeldExample],
    epochs: int = 20,
    lr: float = 1e-3,
    config: SeldConfig = SeldConfig(),
    seed: int = 0,
    batch: int = 4,
    augment: bool = True,
    encoder: SeldEncoder | None = None,
    on_epoch=None,
) -> tuple[SeldEncoder, list[float]]:
    """Fit the encoder on synthetic clips; returns it and the per-epoch mean loss."""
    enc = encoder or SeldEncoder(config, seed=seed)
    opt = AdamW(enc.parameters(), lr=lr)
    rng = np.random.default_rng(seed + 1)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(examples))
        total = 0.0
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            opt.zero_grad()
            for i in idx:
                ex = augment_example(examples[i], rng) if augment else examples[i]
                loss = seld_loss(enc(ex.features), ex)
                if not np.isfinite(loss.data):
                    raise FloatingPointError(f"pretraining diverged at epoch {epoch}: loss {loss.data}")
                total += float(loss.data)
                backward(loss)
            opt.step(grad_scale=1.0 / len(idx))
        history.append(total / len(examples))
        log.info("seld epoch %d loss %.5f", epoch, history[-1])
        if on_epoch is not None:
            on_epoch(epoch, history[-1], enc)
    return enc, history
