"""Run configuration and its line-based ``key = value`` text form."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from ..acoustic.seld import SeldConfig
from ..visual import VisualConfig


class ConfigError(ValueError):
    """Bad configuration text; ``line`` holds the offending source line when known."""

    def __init__(self, message: str, line: str | None = None):
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class Config:
    # data
    width: int = 64
    frames: int = 3
    # visual
    widths: tuple[int, ...] = (16, 32, 64, 96)
    transformer_layers: int = 3
    heads: int = 4
    ffn_mult: int = 2
    fpn_width: int = 32
    final_upsample: str = "bilinear"
    logit_stride: int = 4
    # acoustic
    dft_size: int = 256
    seld_filters: int = 16
    seld_gru: int = 32
    seld_fc: int = 64
    n_classes: int = 2
    seld_checkpoint: str = ""
    # fusion
    fusion_heads: int = 4
    # objective
    lambda_distill: float = 5.0
    lambda_dice: float = 1.0
    # optimisation
    lr: float = 1e-4
    weight_decay: float = 0.0
    batch: int = 2
    steps: int = 500
    seed: int = 0
    precision: str = "f32"
    val_every: int = 0
    # ablations
    no_audio: bool = False
    mono: bool = False
    no_teacher: bool = False
    no_spe: bool = False
    concat_fusion: bool = False
    no_loc_branch: bool = False
    transformer_spe: bool = False
    unfreeze_audio: bool = False

    def __post_init__(self):
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.final_upsample not in ("bilinear", "nearest"):
            raise ConfigError(f"final_upsample must be bilinear or nearest, got {self.final_upsample!r}")
        if self.batch < 1 or self.steps < 0 or self.frames < 1:
            raise ConfigError("batch and frames must be positive and steps non-negative")
        if self.lambda_distill < 0 or self.lambda_dice < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.width % (2 ** len(self.widths)):
            raise ConfigError(f"width {self.width} must be divisible by {2 ** len(self.widths)}")

    @property
    def has_teacher(self) -> bool:
        return not (self.no_teacher or self.no_audio)

    def visual(self) -> VisualConfig:
        return VisualConfig(self.widths, self.transformer_layers, self.heads, self.ffn_mult,
                            self.fpn_width, self.transformer_spe, self.final_upsample,
                            self.logit_stride)

    def seld(self) -> SeldConfig:
        pools = {256: (8, 4, 2), 128: (4, 4, 2), 64: (4, 2, 2), 32: (2, 2, 2)}.get(self.dft_size)
        if pools is None:
            raise ConfigError(f"no frequency pool schedule for dft_size {self.dft_size}")
        return SeldConfig(4, self.dft_size, self.seld_filters, pools, self.seld_gru, self.seld_fc, self.n_classes)

    # ---- text form ------------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def replace(self, **kw) -> "Config":
        return dataclasses.replace(self, **kw)

    def with_overrides(self, pairs: dict[str, str]) -> "Config":
        kinds = {f.name: f for f in fields(self)}
        values = {}
        for key, raw in pairs.items():
            if key not in kinds:
                raise ConfigError(f"unknown config key {key!r}", f"{key} = {raw}")
            values[key] = _parse(kinds[key], raw)
        return dataclasses.replace(self, **values)

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "Config":
        kinds = {f.name: f for f in fields(cls)}
        values = {}
        for lineno, raw_line in enumerate(text.splitlines(), 1):
            line = raw_line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'", raw_line)
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}", raw_line)
            try:
                values[key] = _parse(kinds[key], val)
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: {exc}", raw_line) from exc
        return cls(**values)

    @classmethod
    def load(cls, path) -> "Config":
        p = Path(path)
        return cls.from_text(p.read_text(encoding="utf-8"), str(p))


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(f: dataclasses.Field, raw: str):
    default = f.default
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{f.name}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return raw
