"""The full audio-visual saliency model: encoders, fusion, two decoders."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..acoustic.features import stft_features
from ..acoustic.seld import AcousticEmbeddings, SeldEncoder
from ..fusion import AcfBlock, FusionOutput, fuse
from ..geometry import ErGrid, build_spe_table
from ..objective import LossReport, LossWeights, combine_losses, distill_loss, structure_loss
from ..synth.render import ClipSample
from ..tensor import Tensor, no_grad, ops, stop_gradient
from ..tensor.nn import Module
from ..visual import FpnDecoder, VisualEncoder
from .config import Config

# per-component seed offsets, so removing one component never shifts another's init
_VISUAL, _STUDENT, _TEACHER, _DEC_STU, _DEC_TCH, _ACOUSTIC = range(1, 7)


@dataclass
class ModelOutput:
    logits_stu: Tensor
    logits_tch: Tensor | None
    fusion: FusionOutput

    @property
    def masks(self) -> np.ndarray:
        return ops.sigmoid(self.logits_stu).data

    @property
    def heatmap(self) -> np.ndarray | None:
        g = self.fusion.gate
        return None if g is None else g.data


class AvsModel(Module):
    def __init__(self, config: Config, acoustic: SeldEncoder | None = None):
        c = config
        self._config = c
        vc = c.visual()

        def rng(k):
            return np.random.default_rng([c.seed, k])

        self.visual = VisualEncoder(vc, rng(_VISUAL))
        self.dec_stu = FpnDecoder(rng(_DEC_STU), vc)
        self.acoustic = None
        self.student = self.teacher = self.dec_tch = None
        if not c.no_audio:
            self.acoustic = acoustic if acoustic is not None else SeldEncoder(c.seld(), seed=c.seed * 7 + _ACOUSTIC)
            if self.acoustic.config != c.seld():
                raise ValueError("acoustic encoder config does not match the run config")
            kw = dict(heads=c.fusion_heads, ffn_mult=c.ffn_mult, concat=c.concat_fusion,
                      loc_branch=not c.no_loc_branch)
            c_e = c.seld_fc
            self.student = AcfBlock(rng(_STUDENT), vc.channels, c_e, **kw)
            if c.has_teacher:
                self.teacher = AcfBlock(rng(_TEACHER), vc.channels, c_e, with_gt=True, **kw)
                self.dec_tch = FpnDecoder(rng(_DEC_TCH), vc)
        feat_w = c.width // vc.stride
        spe = build_spe_table(ErGrid(feat_w), vc.channels)
        self._spe = np.zeros_like(spe) if c.no_spe else spe
        self._emb_cache: dict = {}

    @property
    def config(self) -> Config:
        return self._config

    def trainable(self) -> list[Tensor]:
        return [p for name, p in self.named_parameters()
                if self._config.unfreeze_audio or not name.startswith("acoustic.")]

    def named_parameters(self, prefix: str = ""):
        for key in ("visual", "acoustic", "student", "teacher", "dec_stu", "dec_tch"):
            mod = getattr(self, key)
            if mod is not None:
                yield from mod.named_parameters(f"{prefix}{key}.")

    # ---- pieces ------------------------------------------------------------

    def embeddings(self, clip: ClipSample) -> AcousticEmbeddings:
        if clip.audio is None:
            raise ValueError(f"clip {clip.name or clip.seed} has no audio; use the no_audio configuration")
        audio = clip.audio.mono() if self._config.mono else clip.audio
        feats = stft_features(audio, self._config.dft_size)
        if self._config.unfreeze_audio:
            return self.acoustic.embeddings(feats)
        key = (clip.name, clip.seed, self._config.mono, audio.channels.tobytes())
        cached = self._emb_cache.get(key)
        if cached is None:
            with no_grad():
                e = self.acoustic.embeddings(feats)
            cached = (e.g_sem.data.copy(), e.g_loc.data.copy())
            self._emb_cache[key] = cached
        return AcousticEmbeddings(Tensor(cached[0]), Tensor(cached[1]))

    def clear_cache(self) -> None:
        self._emb_cache.clear()

    def forward(self, clip: ClipSample, mode: str = "infer") -> ModelOutput:
        frames = Tensor(clip.frames_float())
        f, levels = self.visual(frames)
        if self.student is None:
            fused = FusionOutput(f)
        else:
            gt = Tensor(clip.masks_float()) if mode == "train" and self.teacher is not None else None
            spe = self._spe.astype(f.dtype)
            fused = fuse(f, self.embeddings(clip), spe, self.student, self.teacher, mode, gt)
        logits_stu = self.dec_stu(fused.f_stu, levels)
        logits_tch = None
        if fused.f_tch is not None:
            logits_tch = self.dec_tch(fused.f_tch, [stop_gradient(lv) for lv in levels])
        return ModelOutput(logits_stu, logits_tch, fused)

    __call__ = forward

    def loss(self, clip: ClipSample) -> tuple[Tensor, LossReport, ModelOutput]:
        c = self._config
        out = self.forward(clip, "train")
        gt = clip.masks_float()
        l_stu = structure_loss(out.logits_stu, gt, c.lambda_dice)
        l_tch = l_dis = None
        if out.logits_tch is not None:
            l_tch = structure_loss(out.logits_tch, gt, c.lambda_dice)
            l_dis = distill_loss(out.fusion.f_stu, out.fusion.f_tch)
        total, report = combine_losses(l_stu, l_tch, l_dis, LossWeights(c.lambda_distill, c.lambda_dice))
        return total, report, out
