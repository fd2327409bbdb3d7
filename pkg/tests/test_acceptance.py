"""Acceptance experiments A1-A8. Each test records one pass/fail line, echoed in the terminal summary."""

import math
import time

import numpy as np
import pytest

from conftest import record
from pavsod.acoustic import add_noise, doa_oracle, encode_bformat, evaluate_seld, random_directions
from pavsod.geometry import ErGrid, angular_distance, build_spe_table, er_to_sphere, pixel_directions
from pavsod.gradsuite import E2E_TOL, OP_TOL, run_suite
from pavsod.pipeline import AvsModel, Config, evaluate, load_checkpoint, save_checkpoint, train
from pavsod.synth import SceneParams, load_clip, random_scene, render_clip, save_clip
from pavsod.tensor import backward, precision

# A4/A5 protocol: 64 train clips (even seeds) and 16 held-out clips (odd seeds)
GROUNDING_TRAIN = 64
GROUNDING_VAL = 16
GROUNDING_STEPS = 2000


@pytest.fixture(scope="module")
def grounding_runs(seld_run):
    params = SceneParams.ambiguous()
    train_clips = [render_clip(random_scene(2 * i, params)) for i in range(GROUNDING_TRAIN)]
    val_clips = [render_clip(random_scene(2 * i + 1, params)) for i in range(GROUNDING_VAL)]
    runs = {}
    variants = {"ambisonic": {}, "mono": {"mono": True}, "none": {"no_audio": True},
                "lambda0": {"lambda_distill": 0.0}}
    t0 = time.perf_counter()
    for name, over in variants.items():
        cfg = Config(steps=GROUNDING_STEPS, **over)
        acoustic = None if cfg.no_audio else seld_run["encoder"]
        res = train(cfg, train_clips, acoustic=acoustic)
        runs[name] = evaluate(res.model, val_clips)
    runs["seconds"] = time.perf_counter() - t0
    return runs


def test_a1_gradient_suite():
    t0 = time.perf_counter()
    reports = run_suite()
    dt = time.perf_counter() - t0
    failed = [r.name for r in reports if not r.passed]
    e2e = reports[-1]
    ops_worst = max(r.max_rel_error for r in reports[:-1])
    ok = not failed and e2e.max_rel_error < E2E_TOL and ops_worst < OP_TOL and dt < 120
    record("A1", ok, f"{len(reports) - len(failed)}/{len(reports)} checks; worst op/block rel {ops_worst:.2e} "
                     f"(tol {OP_TOL:g}); end-to-end rel {e2e.max_rel_error:.2e} over {e2e.checked} coords "
                     f"(tol {E2E_TOL:g}); {dt:.1f}s")
    assert ok, failed


def test_a2_geometry_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    details = []
    ok = True
    for w in (32, 64, 128):
        grid = ErGrid(w)
        dirs = pixel_directions(grid)
        uv = rng.uniform(0, 1, size=(500, 2)) * (w, w // 2)
        pts = np.array([er_to_sphere(grid, u, v) for u, v in uv])
        norm_err = max(np.abs(np.linalg.norm(dirs, axis=-1) - 1).max(), np.abs(np.linalg.norm(pts, axis=-1) - 1).max())
        t = build_spe_table(grid, 48)
        interior = np.linalg.norm(t[:, 1:] - t[:, :-1], axis=-1).max()
        seam = np.linalg.norm(t[:, 0] - t[:, -1], axis=-1).max()
        top = t[0]
        spread = max(np.linalg.norm(top - top[i], axis=-1).max() for i in range(w))
        eq = t[w // 4]
        eq_adj = np.linalg.norm(eq - np.roll(eq, 1, axis=0), axis=-1).max()
        # the top-row diameter is 2 sin(π/W) against 2 sin(π/W) cos(π/W) for equator neighbours
        pole_ok = spread <= eq_adj / math.cos(math.pi / w) * 1.01
        ok &= norm_err < 1e-9 and seam <= interior * 1.01 and pole_ok
        details.append(f"W={w}: norm {norm_err:.1e}, seam/interior {seam / interior:.3f}, pole spread/eq {spread / eq_adj:.3f}")
    dt = time.perf_counter() - t0
    ok &= dt < 10
    record("A2", ok, "; ".join(details) + f"; {dt:.2f}s")
    assert ok


def test_a3_overfit(seld_run):
    clips = [render_clip(random_scene(2 * i)) for i in range(8)]
    cfg = Config(steps=500)
    t0 = time.perf_counter()
    res = train(cfg, clips, acoustic=seld_run["encoder"])
    m = evaluate(res.model, clips)
    dt = time.perf_counter() - t0
    ok = m["mae"] < 0.05 and m["fbeta"] > 0.9 and dt < 15 * 60
    record("A3", ok, f"train MAE {m['mae']:.4f} (< 0.05), F_beta {m['fbeta']:.4f} (> 0.9), {cfg.steps} steps, {dt:.0f}s")
    assert ok


def test_a4_audio_grounding(grounding_runs):
    r = grounding_runs
    hit = r["ambisonic"]["heatmap_hit_rate"]
    a, mo, no = r["ambisonic"]["mae"], r["mono"]["mae"], r["none"]["mae"]
    ok = hit >= 0.7 and a < mo <= no
    record("A4", ok, f"heatmap hit {hit:.1%} (>= 70%); val MAE ambisonic {a:.4f} < mono {mo:.4f} <= none {no:.4f}; "
                     f"{GROUNDING_STEPS} steps per run, 4 runs {r['seconds']:.0f}s")
    assert ok


def test_a5_teacher_ablation(grounding_runs):
    default, zero = grounding_runs["ambisonic"]["mae"], grounding_runs["lambda0"]["mae"]
    clip = render_clip(random_scene(1, SceneParams.ambiguous()))
    from pavsod.objective import structure_loss
    with precision("f64"):
        model = AvsModel(Config(precision="f64", unfreeze_audio=True, widths=(4, 6, 8, 12), transformer_layers=1,
                                heads=2, fpn_width=4, seld_filters=2, seld_gru=4, seld_fc=4, fusion_heads=2))
        out = model.forward(clip, "train")
        backward(structure_loss(out.logits_tch, clip.masks_float()))
    leaked = [n for n, p in model.named_parameters()
              if n.startswith(("visual.", "acoustic.")) and p.grad is not None and np.any(p.grad != 0)]
    ok = default <= zero and not leaked
    record("A5", ok, f"val MAE lambda=5 {default:.4f} <= lambda=0 {zero:.4f}; encoder grads from teacher loss "
                     f"{'exactly zero' if not leaked else 'nonzero in ' + ', '.join(leaked[:3])}")
    assert ok


def test_a6_doa_oracle():
    rng = np.random.default_rng(6)
    t0 = time.perf_counter()
    dirs = random_directions(rng, 1000)
    clean, noisy = [], []
    for d in dirs:
        clip = encode_bformat(d, rng.normal(size=2048))
        clean.append(np.degrees(angular_distance(doa_oracle(clip), d)))
        noisy.append(np.degrees(angular_distance(doa_oracle(add_noise(clip, 10.0, rng)), d)))
    dt = time.perf_counter() - t0
    ok = max(clean) < 1.0 and max(noisy) < 10.0 and dt < 30
    record("A6", ok, f"max error clean {max(clean):.2e} deg (< 1), 10 dB {max(noisy):.2f} deg (< 10), "
                     f"1000 directions, {dt:.1f}s")
    assert ok


def test_a7_seld_pretraining(seld_run):
    m = evaluate_seld(seld_run["encoder"], seld_run["val"])
    dt = seld_run["seconds"]
    ok = m["sed_accuracy"] > 0.9 and m["doa_median_deg"] < 15 and len(seld_run["history"]) <= 20 and dt < 20 * 60
    record("A7", ok, f"SED frame accuracy {m['sed_accuracy']:.3f} (> 0.9), median DOA {m['doa_median_deg']:.2f} deg "
                     f"(< 15), {len(seld_run['history'])} epochs, {dt:.0f}s")
    assert ok


def test_a8_determinism_round_trips(tmp_path):
    t0 = time.perf_counter()
    clips = [render_clip(random_scene(s)) for s in range(2)]
    cfg = Config(steps=3)
    a = train(cfg, clips, checkpoint_path=tmp_path / "a.pavc")
    b = train(cfg, clips)
    logs_equal = a.log_lines == b.log_lines
    ck = load_checkpoint(tmp_path / "a.pavc")
    save_checkpoint(tmp_path / "b.pavc", ck.model, ck.optimizer, ck.step)
    ck_equal = (tmp_path / "a.pavc").read_bytes() == (tmp_path / "b.pavc").read_bytes()
    clip_equal = all(load_clip(save_clip(c, tmp_path / f"clip{i}")).equals(c) for i, c in enumerate(clips))
    again = render_clip(random_scene(0)).equals(clips[0])
    dt = time.perf_counter() - t0
    ok = logs_equal and ck_equal and clip_equal and again and dt < 120
    record("A8", ok, f"loss logs identical {logs_equal}; checkpoint save/load/save bytes identical {ck_equal}; "
                     f"clip round-trip bitwise {clip_equal}; re-render bitwise {again}; {dt:.1f}s")
    assert ok
