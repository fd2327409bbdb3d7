"""Command-line entry point: ``pavsod <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure (bad data, failed check),
2 configuration error, 3 missing input file.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import ErGrid, build_spe_table, spe_ppm
from .pipeline import Config, ConfigError, infer, load_checkpoint, load_encoder, save_encoder, train
from .synth import SceneParams, load_clip, make_dataset, read_manifest
from .synth.imageio import read_pgm, write_pgm, write_ppm
from .tensor.serialize import save_tensor

log = logging.getLogger("pavsod")

EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3

# boolean switches shared by every config-driven subcommand: flag -> config key
_SWITCHES = {
    "--mono": "mono",
    "--no-audio": "no_audio",
    "--no-teacher": "no_teacher",
    "--no-spe": "no_spe",
    "--concat-fusion": "concat_fusion",
    "--no-loc-branch": "no_loc_branch",
    "--transformer-spe": "transformer_spe",
    "--unfreeze-audio": "unfreeze_audio",
}


def _add_config_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="line-based 'key = value' config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--lambda-distill", type=float)
    p.add_argument("--seld-checkpoint", help="pretrained acoustic encoder file")
    for flag in _SWITCHES:
        p.add_argument(flag, action="store_true")


def resolve_config(args) -> Config:
    """File first, then ``--set`` pairs, then dedicated flags."""
    cfg = Config()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        cfg = Config.load(path)
    pairs = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}", item)
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    cfg = cfg.with_overrides(pairs)
    direct = {k: getattr(args, k) for k in ("seed", "steps", "lr", "batch", "lambda_distill", "seld_checkpoint")
              if getattr(args, k) is not None}
    direct.update({key: True for flag, key in _SWITCHES.items() if getattr(args, key)})
    return cfg.replace(**direct) if direct else cfg


def _acoustic_for(cfg: Config):
    if cfg.no_audio:
        return None
    if cfg.seld_checkpoint:
        path = Path(cfg.seld_checkpoint)
        if not path.exists():
            raise FileNotFoundError(f"acoustic encoder checkpoint not found: {path}")
        return load_encoder(path)
    log.warning("no seld_checkpoint given: the acoustic encoder is randomly initialized")
    return None


def _split_clips(data: str, split: str):
    entries = read_manifest(data)
    if split != "all":
        entries = [e for e in entries if e.split == split]
    return [load_clip(e) for e in entries]


def _to_u8(p: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(p) * 255.0), 0, 255).astype(np.uint8)


# ---- subcommands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    params = SceneParams.ambiguous() if args.ambiguous else SceneParams()
    over = {k: getattr(args, k) for k in ("width", "frames") if getattr(args, k) is not None}
    if over:
        params = dataclasses.replace(params, **over)
    audio = "none" if args.no_audio else "mono" if args.mono else "ambisonic"
    entries = make_dataset(args.clips, args.out, seed=args.seed, params=params, audio=audio)
    print(f"wrote {len(entries)} clips to {args.out}")
    return 0


def cmd_seld_pretrain(args) -> int:
    from .acoustic.seld import evaluate_seld, make_seld_dataset, pretrain_seld

    cfg = resolve_config(args).seld()
    train_set = make_seld_dataset(args.clips_per_class, cfg, seed=args.seed * 2 + 1)
    val_set = make_seld_dataset(max(1, args.clips_per_class // 4), cfg, seed=args.seed * 2 + 2)

    def report(epoch, loss, enc):
        print(f"epoch\t{epoch + 1}\t{loss:.6f}", flush=True)

    enc, _ = pretrain_seld(train_set, epochs=args.epochs, lr=args.lr, config=cfg, seed=args.seed,
                           on_epoch=report)
    m = evaluate_seld(enc, val_set)
    print(f"val\tsed_accuracy {m['sed_accuracy']:.4f}\tdoa_median_deg {m['doa_median_deg']:.2f}")
    save_encoder(args.out, enc)
    return 0


def cmd_train(args) -> int:
    model = optimizer = None
    start = 0
    if args.resume:
        if not Path(args.resume).exists():
            raise FileNotFoundError(f"checkpoint not found: {args.resume}")
        ck = load_checkpoint(args.resume)
        cfg, model, optimizer, start = ck.config, ck.model, ck.optimizer, ck.step
        if args.steps is not None:
            cfg = cfg.replace(steps=args.steps)
    else:
        cfg = resolve_config(args)
    clips = _split_clips(args.data, "train")
    val = _split_clips(args.data, "val") if cfg.val_every else []
    acoustic = None if model is not None else _acoustic_for(cfg)
    result = train(cfg, clips, val, acoustic=acoustic, model=model, optimizer=optimizer, start_step=start,
                   on_line=lambda line: print(line, flush=True), checkpoint_path=args.out)
    for step, m in result.val_history:
        print(f"val\t{step}\t{m['mae']:.6f}\t{m['fbeta']:.6f}\t{m['heatmap_hit_rate']:.4f}", file=sys.stderr)
    return 0


def cmd_infer(args) -> int:
    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    model = load_checkpoint(args.checkpoint).model
    clips = [load_clip(c) for c in args.clip] if args.clip else _split_clips(args.data, args.split)
    stride = model.config.visual().stride
    out = Path(args.out)
    for clip in clips:
        pred = infer(model, clip)
        d = out / clip.name
        d.mkdir(parents=True, exist_ok=True)
        for t, m in enumerate(pred.masks):
            write_pgm(d / f"mask_{t}.pgm", _to_u8(m))
        if args.heatmap:
            if pred.heatmap is None:
                raise ValueError("this model has no location heatmap (trained without audio)")
            for t, h in enumerate(pred.heatmap[:, 0]):
                up = np.repeat(np.repeat(h, stride, axis=0), stride, axis=1)
                write_pgm(d / f"heatmap_{t}.pgm", _to_u8(up))
        print(f"{clip.name}\t{len(pred.masks)} frames -> {d}")
    return 0


def cmd_eval(args) -> int:
    from .objective import adaptive_fbeta, mae

    clips = _split_clips(args.data, args.split)
    if args.pred:
        preds = {}
        for clip in clips:
            d = Path(args.pred) / clip.name
            preds[clip.name] = [read_pgm(d / f"mask_{t}.pgm") / 255.0 for t in range(clip.n_frames)]
    else:
        if not args.checkpoint:
            raise ValueError("eval needs --checkpoint or --pred")
        if not Path(args.checkpoint).exists():
            raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
        model = load_checkpoint(args.checkpoint).model
        preds = {clip.name: list(infer(model, clip).masks) for clip in clips}
    maes, fbs = [], []
    for clip in clips:
        gt = clip.masks_float()[:, 0]
        for t in range(clip.n_frames):
            e = mae(preds[clip.name][t], gt[t])
            fb = adaptive_fbeta(preds[clip.name][t], gt[t])
            maes.append(e)
            if fb is not None:
                fbs.append(fb)
            print(f"{clip.name}/{t} {e:.6f} {'nan' if fb is None else f'{fb:.6f}'}")
    fb_mean = float(np.mean(fbs)) if fbs else float("nan")
    print(f"summary {float(np.mean(maes)):.6f} {fb_mean:.6f}")
    return 0


def cmd_grad_check(args) -> int:
    from .gradsuite import run_suite

    reports = run_suite(include_end_to_end=not args.ops_only)
    for r in reports:
        print(f"{'PASS' if r.passed else 'FAIL'}\t{r.name}\tmax_rel {r.max_rel_error:.3e}\t"
              f"coords {r.checked}\ttol {r.tol:g}")
    ok = all(r.passed for r in reports)
    print(f"{sum(r.passed for r in reports)}/{len(reports)} checks passed")
    return 0 if ok else EXIT_FAILURE


def cmd_spe_dump(args) -> int:
    table = build_spe_table(ErGrid(args.width), args.dim)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_tensor(out.with_suffix(".pavt"), table)
    write_ppm(out.with_suffix(".ppm"), spe_ppm(table))
    print(f"SPE {table.shape[0]}x{table.shape[1]}x{table.shape[2]} -> {out.with_suffix('.pavt')}, "
          f"{out.with_suffix('.ppm')}")
    return 0


def cmd_doa_probe(args) -> int:
    from .acoustic.audio_io import read_audio
    from .acoustic.bformat import doa_oracle

    path = Path(args.audio)
    if not path.exists():
        raise FileNotFoundError(f"audio file not found: {path}")
    clip = read_audio(path)
    seg = args.segment or clip.length
    print("segment\tstart_s\tazimuth_deg\televation_deg\tx\ty\tz")
    for i, start in enumerate(range(0, clip.length, seg)):
        d = doa_oracle(clip.segment(start, min(start + seg, clip.length)))
        t0 = start / clip.sample_rate
        if d is None:
            print(f"{i}\t{t0:.4f}\tno-estimate")
            continue
        az = np.degrees(np.arctan2(d[1], d[0]))
        el = np.degrees(np.arcsin(np.clip(d[2], -1, 1)))
        print(f"{i}\t{t0:.4f}\t{az:.2f}\t{el:.2f}\t{d[0]:.4f}\t{d[1]:.4f}\t{d[2]:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pavsod", description="Audio-visual salient object detection on 360° clips")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset")
    p.add_argument("--clips", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--mono", action="store_true")
    p.add_argument("--no-audio", action="store_true")
    p.add_argument("--ambiguous", action="store_true", help="bright, slow distractors")
    p.add_argument("--width", type=int)
    p.add_argument("--frames", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("seld-pretrain", help="pretrain the acoustic encoder on synthetic clips")
    _add_config_options(p)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--clips-per-class", type=int, default=64)
    p.set_defaults(func=cmd_seld_pretrain)

    p = sub.add_parser("train", help="train the saliency model")
    _add_config_options(p)
    p.add_argument("--data", required=True, help="dataset directory with a manifest")
    p.add_argument("--out", help="checkpoint file written at the end")
    p.add_argument("--resume", help="continue from a checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write predicted masks (and heatmaps) as PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", action="append", help="clip directory (repeatable)")
    p.add_argument("--data")
    p.add_argument("--split", default="val", choices=("train", "val", "all"))
    p.add_argument("--out", required=True)
    p.add_argument("--heatmap", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="per-frame MAE and adaptive F-beta")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val", choices=("train", "val", "all"))
    p.add_argument("--checkpoint")
    p.add_argument("--pred", help="directory of predicted masks (as written by infer)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--ops-only", action="store_true", help="skip the end-to-end micro model")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("spe-dump", help="write a spherical positional encoding table")
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--dim", type=int, default=96)
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_spe_dump)

    p = sub.add_parser("doa-probe", help="per-segment intensity-vector direction of arrival")
    p.add_argument("--audio", required=True, help="4-channel WAV or raw f32 with .hdr sidecar")
    p.add_argument("--segment", type=int, default=0, help="samples per segment (0: whole clip)")
    p.set_defaults(func=cmd_doa_probe)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "infer" and not (args.clip or args.data):
        print("error: infer needs --clip or --data", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.line is not None:
            print(exc.line, file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
