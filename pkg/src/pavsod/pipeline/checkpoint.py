"""Checkpoints: config snapshot, every parameter, optimizer moments and step count
in one named-tensor collection file.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..acoustic.seld import SeldConfig, SeldEncoder
from ..tensor import precision
from ..tensor.optim import AdamW
from ..tensor.serialize import FormatError, load_collection, save_collection
from .config import Config
from .model import AvsModel


@dataclass
class Checkpoint:
    config: Config
    model: AvsModel
    optimizer: AdamW | None
    step: int


def _named_trainable(model: AvsModel) -> list[str]:
    keep = {id(p) for p in model.trainable()}
    return [n for n, p in model.named_parameters() if id(p) in keep]


def checkpoint_tensors(model: AvsModel, optimizer: AdamW | None) -> dict:
    tensors = {f"param.{n}": p.data for n, p in model.named_parameters()}
    if optimizer is not None:
        for name, m, v in zip(_named_trainable(model), optimizer.m, optimizer.v):
            tensors[f"adam_m.{name}"] = m
            tensors[f"adam_v.{name}"] = v
    return tensors


def save_checkpoint(path, model: AvsModel, optimizer: AdamW | None = None, step: int = 0) -> None:
    meta = f"step = {step}\n" + model.config.to_text()
    save_collection(path, checkpoint_tensors(model, optimizer), meta)


def load_checkpoint(path) -> Checkpoint:
    tensors, meta = load_collection(path)
    lines = meta.splitlines()
    if not lines or not lines[0].startswith("step = "):
        raise FormatError(f"{path}: checkpoint metadata lacks a step counter")
    step = int(lines[0].split("=", 1)[1])
    config = Config.from_text("\n".join(lines[1:]), f"{path}:meta")
    with precision(config.precision):
        acoustic = None if config.no_audio else SeldEncoder(config.seld())
        model = AvsModel(config, acoustic)
        params = {k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")}
        model.load_state_dict(params)
        opt = None
        names = _named_trainable(model)
        if names and f"adam_m.{names[0]}" in tensors:
            opt = AdamW(model.trainable(), lr=config.lr, weight_decay=config.weight_decay)
            state = {}
            for i, n in enumerate(names):
                state[f"m.{i}"] = tensors[f"adam_m.{n}"]
                state[f"v.{i}"] = tensors[f"adam_v.{n}"]
            opt.load_state(state, step)
    return Checkpoint(config, model, opt, step)


def save_encoder(path, encoder: SeldEncoder) -> None:
    c = encoder.config
    meta = (f"filters = {c.filters}\ngru_width = {c.gru_width}\nfc_width = {c.fc_width}\n"
            f"n_classes = {c.n_classes}\ndft_size = {c.dft_size}\n"
            f"pools = {','.join(map(str, c.pools))}\n")
    save_collection(path, encoder.state_dict(), meta)


def load_encoder(path) -> SeldEncoder:
    tensors, meta = load_collection(path)
    kv = dict((s.strip() for s in line.split("=", 1)) for line in meta.splitlines() if "=" in line)
    try:
        cfg = SeldConfig(4, int(kv["dft_size"]), int(kv["filters"]), tuple(int(x) for x in kv["pools"].split(",")),
                         int(kv["gru_width"]), int(kv["fc_width"]), int(kv["n_classes"]))
    except KeyError as exc:
        raise FormatError(f"{path}: encoder metadata lacks {exc}") from exc
    dtype = next(iter(tensors.values())).dtype
    with precision("f64" if dtype.itemsize == 8 else "f32"):
        enc = SeldEncoder(cfg)
    enc.load_state_dict(tensors)
    return enc
