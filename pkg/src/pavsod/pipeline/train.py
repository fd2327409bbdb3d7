"""Training loop, inference and evaluation over in-memory clips."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..acoustic.seld import SeldEncoder
from ..fusion import downsample_masks
from ..objective import LossReport, adaptive_fbeta, mae
from ..synth.render import ClipSample
from ..tensor import Tensor, backward, no_grad, precision
from ..tensor.optim import AdamW
from .checkpoint import save_checkpoint
from .config import Config
from .model import AvsModel

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def format_log_line(step: int, report: LossReport) -> str:
    return (f"{step}\t{report.total:.6f}\t{report.l_struc_stu:.6f}\t"
            f"{report.l_struc_tch:.6f}\t{report.l_distill:.6f}")


@dataclass
class TrainResult:
    model: AvsModel
    optimizer: AdamW
    log_lines: list[str] = field(default_factory=list)
    val_history: list[tuple[int, dict]] = field(default_factory=list)
    step: int = 0


def _batches(n: int, batch: int, rng: np.random.Generator):
    """Manifest order first, then a fresh seeded permutation per epoch."""
    order = list(range(n))
    while True:
        for start in range(0, n, batch):
            yield order[start:start + batch]
        order = [int(i) for i in rng.permutation(n)]


def train(config: Config, clips: Sequence[ClipSample], val_clips: Sequence[ClipSample] = (),
          acoustic: SeldEncoder | None = None, model: AvsModel | None = None,
          optimizer: AdamW | None = None, start_step: int = 0,
          on_line: Callable[[str], None] | None = None, checkpoint_path=None) -> TrainResult:
    """Run ``config.steps`` optimizer steps, each averaging ``config.batch`` clips.

    Every step emits ``step  total  l_stu  l_tch  l_distill`` (tab-separated).
    On a non-finite loss or gradient the pre-step state is written to
    ``checkpoint_path`` (when given) and :class:`TrainingDiverged` is raised.
    """
    if not clips:
        raise ValueError("training needs at least one clip")
    with precision(config.precision):
        model = model or AvsModel(config, acoustic)
        opt = optimizer or AdamW(model.trainable(), lr=config.lr, weight_decay=config.weight_decay)
        result = TrainResult(model, opt, step=start_step)
        batches = _batches(len(clips), config.batch, np.random.default_rng([config.seed, 99]))
        for _ in range(start_step):  # a resumed run continues the same data order
            next(batches)
        for step in range(start_step + 1, start_step + config.steps + 1):
            idx = next(batches)
            opt.zero_grad()
            sums = np.zeros(4)
            try:
                for i in idx:
                    total, rep, _ = model.loss(clips[i])
                    backward(total)
                    sums += (rep.l_struc_stu, rep.l_struc_tch, rep.l_distill, rep.total)
                opt.step(grad_scale=1.0 / len(idx))
            except FloatingPointError as exc:
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, model, opt, result.step)
                raise TrainingDiverged(f"step {step}: {exc}; last good step {result.step}") from exc
            sums /= len(idx)
            line = format_log_line(step, LossReport(*sums[:3], sums[3]))
            result.log_lines.append(line)
            result.step = step
            if on_line is not None:
                on_line(line)
            if config.val_every and val_clips and step % config.val_every == 0:
                metrics = evaluate(model, val_clips)
                result.val_history.append((step, metrics))
                log.info("step %d val mae %.4f fbeta %.4f", step, metrics["mae"], metrics["fbeta"])
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, opt, result.step)
    return result


@dataclass
class Prediction:
    masks: np.ndarray  # T×H×W in (0, 1)
    heatmap: np.ndarray | None  # T×1×h×w location weighting


def infer(model: AvsModel, clip: ClipSample) -> Prediction:
    """Student-only forward pass."""
    with precision(model.config.precision), no_grad():
        c = model.config
        if clip.frames.shape[1:3] != (c.width // 2, c.width):
            raise ValueError(f"clip frames {clip.frames.shape[2]}x{clip.frames.shape[1]} do not match "
                             f"the checkpoint's {c.width}x{c.width // 2}")
        out = model.forward(clip, "infer")
        return Prediction(out.masks[:, 0].astype(np.float64), out.heatmap)


def heatmap_hits(heatmap: np.ndarray, clip: ClipSample) -> list[bool]:
    """Per frame: does the heatmap's argmax cell overlap the ground-truth mask?

    The mask is average-pooled to heatmap resolution; a hit is a strictly
    positive occupancy at the argmax cell (first maximum in raster order).
    """
    t, _, h, w = heatmap.shape
    with precision("f64"):
        occ = downsample_masks(Tensor(clip.masks_float()), h, w).data[:, 0]
    hits = []
    for i in range(t):
        k = int(np.argmax(heatmap[i, 0]))
        hits.append(bool(occ[i].reshape(-1)[k] > 0))
    return hits


def evaluate(model: AvsModel, clips: Sequence[ClipSample]) -> dict:
    """Mean per-frame MAE and F_β (empty masks skipped) plus the heatmap hit rate."""
    maes, fbs, hits = [], [], []
    for clip in clips:
        pred = infer(model, clip)
        gt = clip.masks_float()[:, 0]
        for t in range(clip.n_frames):
            maes.append(mae(pred.masks[t], gt[t]))
            fb = adaptive_fbeta(pred.masks[t], gt[t])
            if fb is not None:
                fbs.append(fb)
        if pred.heatmap is not None:
            hits.extend(heatmap_hits(pred.heatmap, clip))
    return {
        "mae": float(np.mean(maes)),
        "fbeta": float(np.mean(fbs)) if fbs else float("nan"),
        "heatmap_hit_rate": float(np.mean(hits)) if hits else float("nan"),
        "frames": len(maes),
    }
