"""Finite-difference gradient suite: every differentiable op, the model blocks,
and an end-to-end micro model. Runs in 64-bit precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import GradCheckReport, Tensor, backward, grad_check, no_grad, ops, precision, stop_gradient
from .tensor.gradcheck import hold_stop_gradients, rel_error

OP_TOL = 1e-4
E2E_TOL = 1e-3
EPS = 1e-5
# central differences at EPS carry ~1e-10 absolute noise in f64 sums (e.g. on
# key biases, whose true gradient is zero by softmax shift invariance); below
# this magnitude a gradient coordinate is compared in absolute terms
FLOOR = 1e-5


def _leaf(rng, *shape, away_from_zero: float = 0.0, low=None, high=None) -> Tensor:
    if low is not None:
        x = rng.uniform(low, high, size=shape)
    else:
        x = rng.normal(size=shape)
        if away_from_zero:
            x = np.where(np.abs(x) < away_from_zero, np.sign(x + 1e-12) * away_from_zero + x, x)
    return Tensor(x, requires_grad=True)


def _weighted(y: Tensor, seed: int = 99) -> Tensor:
    """Random linear read-out so every output coordinate matters."""
    w = np.random.default_rng(seed).normal(size=y.shape)
    return (y * Tensor(w)).sum()


def _op_cases() -> list[tuple[str, Callable[[], GradCheckReport]]]:
    cases = []

    def case(name):
        def deco(fn):
            cases.append((name, fn))
            return fn
        return deco

    @case("add/sub/mul broadcast")
    def _():
        r = np.random.default_rng(1)
        a, b = _leaf(r, 3, 4), _leaf(r, 1, 4)
        return grad_check(lambda a, b: _weighted((a + b) * a - b), [a, b], EPS, OP_TOL)

    @case("div")
    def _():
        r = np.random.default_rng(2)
        a, b = _leaf(r, 3, 4), _leaf(r, 3, 1, low=0.5, high=2.0)
        return grad_check(lambda a, b: _weighted(a / b), [a, b], EPS, OP_TOL)

    @case("neg/power")
    def _():
        r = np.random.default_rng(3)
        a = _leaf(r, 5, low=0.5, high=2.0)
        return grad_check(lambda a: _weighted(ops.power(-a * -1.0, 3.0) - a), [a], EPS, OP_TOL)

    for name, fn, kw in (("relu", ops.relu, dict(away_from_zero=0.05)), ("sigmoid", ops.sigmoid, {}),
                         ("tanh", ops.tanh, {}), ("exp", ops.exp, {}),
                         ("log", ops.log, dict(low=0.2, high=3.0))):
        def make(fn=fn, kw=kw):
            def run():
                a = _leaf(np.random.default_rng(4), 4, 3, **kw)
                return grad_check(lambda a: _weighted(fn(a)), [a], EPS, OP_TOL)
            return run
        cases.append((name, make()))

    @case("bce_with_logits")
    def _():
        r = np.random.default_rng(5)
        a = _leaf(r, 2, 6)
        t = (r.random((2, 6)) > 0.5).astype(float)
        return grad_check(lambda a: ops.bce_with_logits(a, t).mean(), [a], EPS, OP_TOL)

    @case("sum/mean/reshape/transpose")
    def _():
        a = _leaf(np.random.default_rng(6), 2, 3, 4)
        f = lambda a: _weighted(ops.mean(ops.transpose(ops.reshape(a, (6, 4)), (1, 0)), axis=0, keepdims=True)) \
            + ops.sum(a * a, axis=(0, 2)).sum()
        return grad_check(f, [a], EPS, OP_TOL)

    @case("getitem/concat/stack")
    def _():
        r = np.random.default_rng(7)
        a, b = _leaf(r, 4, 3), _leaf(r, 2, 3)
        f = lambda a, b: _weighted(ops.stack([ops.concat([a[1:3], b], axis=0), a[::1][0:4]], axis=0))
        return grad_check(f, [a, b], EPS, OP_TOL)

    @case("matmul batched")
    def _():
        r = np.random.default_rng(8)
        a, b = _leaf(r, 2, 3, 4), _leaf(r, 4, 5)
        return grad_check(lambda a, b: _weighted(ops.matmul(a, b)), [a, b], EPS, OP_TOL)

    @case("softmax")
    def _():
        a = _leaf(np.random.default_rng(9), 3, 5)
        return grad_check(lambda a: _weighted(ops.softmax(a, axis=-1)), [a], EPS, OP_TOL)

    @case("layer_norm")
    def _():
        r = np.random.default_rng(10)
        x, g, b = _leaf(r, 3, 6), _leaf(r, 6), _leaf(r, 6)
        return grad_check(lambda x, g, b: _weighted(ops.layer_norm(x, g, b)), [x, g, b], EPS, OP_TOL)

    for stride in (1, 2):
        def make(stride=stride):
            def run():
                r = np.random.default_rng(11 + stride)
                x, w = _leaf(r, 2, 2, 5, 6), _leaf(r, 3, 2, 3, 3)
                return grad_check(lambda x, w: _weighted(ops.conv2d(x, w, stride, 1)), [x, w], EPS, OP_TOL)
            return run
        cases.append((f"conv2d stride {stride}", make()))

    for mode in ("max", "avg"):
        def make(mode=mode):
            def run():
                x = _leaf(np.random.default_rng(14), 2, 3, 8)
                return grad_check(lambda x: _weighted(ops.pool(x, mode, 3, 2)), [x], EPS, OP_TOL)
            return run
        cases.append((f"{mode} pool", make()))

    @case("upsample nearest/bilinear")
    def _():
        x = _leaf(np.random.default_rng(15), 1, 2, 3)
        return grad_check(lambda x: _weighted(ops.upsample_nearest(x, 2)) + _weighted(ops.upsample_bilinear(x, 4), 3),
                          [x], EPS, OP_TOL)

    @case("gru bidirectional (4 steps)")
    def _():
        r = np.random.default_rng(16)
        q, d = 3, 2
        x = _leaf(r, 4, d)
        ps = [_leaf(r, d, 3 * q), _leaf(r, q, 3 * q), _leaf(r, 3 * q), _leaf(r, d, 3 * q), _leaf(r, q, 3 * q),
              _leaf(r, 3 * q)]
        f = lambda x, *p: _weighted(ops.gru_bidirectional(x, tuple(p[:3]), tuple(p[3:])))
        return grad_check(f, [x, *ps], EPS, OP_TOL)

    @case("stop_gradient composite")
    def _():
        r = np.random.default_rng(17)
        a, b = _leaf(r, 4), _leaf(r, 4)
        rep = grad_check(lambda a: _weighted(a * stop_gradient(a * b) + ops.tanh(a)), [a], EPS, OP_TOL,
                         hold=True)
        if b.grad is not None and np.any(b.grad != 0):
            rep.failures.append(("b", "gradient leaked through stop_gradient", float(np.abs(b.grad).max())))
        return rep

    return cases


def _module_check(name: str, module, loss_fn, tol=OP_TOL, max_coords=8) -> GradCheckReport:
    params = module.parameters()
    return grad_check(lambda *_: loss_fn(), params, EPS, tol, max_coords=max_coords, floor=FLOOR,
                      name=name, hold=True)


def _block_cases() -> list[tuple[str, Callable[[], GradCheckReport]]]:
    from .acoustic.seld import AcousticEmbeddings, SeldConfig, SeldEncoder, make_seld_example, seld_loss
    from .fusion import AcfBlock, downsample_masks
    from .layers import MultiHeadAttention
    from .objective import dice_loss, distill_loss, structure_loss
    from .visual import Backbone, FpnDecoder, TemporalNonLocal, TransformerEncoder, VisualConfig

    cases = []

    def attention():
        r = np.random.default_rng(20)
        m = MultiHeadAttention(r, 4, 3, 2)
        xq, xk = Tensor(r.normal(size=(5, 4))), Tensor(r.normal(size=(3, 3)))
        return _module_check("multi-head attention", m, lambda: _weighted(m(xq, xk)))

    def transformer():
        r = np.random.default_rng(21)
        m = TransformerEncoder(r, 6, 1, 2)
        x = Tensor(r.normal(size=(2, 4, 6)))
        return _module_check("transformer encoder", m, lambda: _weighted(m(x)))

    def nonlocal_block():
        r = np.random.default_rng(22)
        m = TemporalNonLocal(r, 4)
        m.out_w.data[:] = r.normal(size=m.out_w.shape)
        x = Tensor(r.normal(size=(2, 4, 2, 2)))
        return _module_check("temporal non-local", m, lambda: _weighted(m(x)))

    def backbone():
        r = np.random.default_rng(23)
        m = Backbone(r, (3, 4))
        # zero biases put ReLU inputs exactly on the kink wherever a patch is all zero
        for _, p in m.named_parameters():
            if p.ndim == 3:
                p.data[:] = r.normal(0, 0.5, size=p.shape)
        x = Tensor(r.uniform(size=(1, 3, 8, 16)))
        return _module_check("backbone (2 stages)", m, lambda: _weighted(m(x)[-1]))

    def decoder():
        r = np.random.default_rng(24)
        cfg = VisualConfig(widths=(2, 3, 4, 6), fpn_width=3)
        m = FpnDecoder(r, cfg)
        levels = [Tensor(r.normal(size=(1, c, 8 // 2 ** i, 16 // 2 ** i))) for i, c in enumerate(cfg.widths)]
        return _module_check("FPN decoder", m, lambda: _weighted(m(levels[-1], levels)))

    def acf(with_gt: bool):
        def run():
            # C=8 needs an even width for the 1D encoding; the SPE table is taken as given
            r = np.random.default_rng(25)
            c, c_e = 8, 4
            m = AcfBlock(r, c, c_e, heads=2, with_gt=with_gt)
            f = Tensor(r.normal(size=(2, c, 2, 2)))
            emb = AcousticEmbeddings(Tensor(r.normal(size=(c_e, 3))), Tensor(r.normal(size=(c_e, 3))))
            spe = r.uniform(-1, 1, size=(2, 2, c))
            gt = downsample_masks(Tensor((r.random((2, 1, 4, 4)) > 0.5).astype(float)), 2, 2) if with_gt else None
            return _module_check("teacher block" if with_gt else "student block", m,
                                 lambda: _weighted(m(f, emb, spe, gt).f_stu))
        return run

    def seld():
        r = np.random.default_rng(26)
        cfg = SeldConfig(filters=4, gru_width=8, fc_width=8, n_classes=2)
        m = SeldEncoder(cfg, seed=1)
        ex = make_seld_example(r, 1, cfg, length=5 * 128 + 256)
        x = m.prepare(ex.features)
        return _module_check("acoustic encoder (P=4, Q=8, N=2, T_a=6)", m, lambda: seld_loss(m(x), ex), max_coords=4)

    def losses():
        r = np.random.default_rng(27)
        logits, fs, ft = _leaf(r, 2, 1, 4, 4), _leaf(r, 2, 3, 2, 2), Tensor(r.normal(size=(2, 3, 2, 2)))
        gt = (r.random((2, 1, 4, 4)) > 0.5).astype(float)
        f = lambda lg, fs: structure_loss(lg, gt, 1.0) + dice_loss(ops.sigmoid(lg), gt) + distill_loss(fs, ft)
        return grad_check(f, [logits, fs], EPS, 1e-5, name="structure/dice/distill losses")

    cases += [("multi-head attention", attention), ("transformer encoder", transformer),
              ("temporal non-local", nonlocal_block), ("backbone", backbone), ("decoder", decoder),
              ("student block", acf(False)), ("teacher block", acf(True)), ("acoustic encoder", seld),
              ("losses", losses)]
    return cases


def micro_setup(seed: int = 0):
    """A tiny 64-bit model (every module present, audio unfrozen) and one clip."""
    from .pipeline.config import Config
    from .pipeline.model import AvsModel
    from .synth.render import SceneParams, random_scene, render_clip

    cfg = Config(width=32, frames=2, widths=(4, 6, 8, 12), transformer_layers=1, heads=2, ffn_mult=1,
                 fpn_width=4, dft_size=32, seld_filters=2, seld_gru=3, seld_fc=4, fusion_heads=2,
                 precision="f64", unfreeze_audio=True, seed=seed)
    params = SceneParams(width=32, frames=2, radius=0.7, n_distractors=1, samples_per_frame=80)
    clip = render_clip(random_scene(seed + 3, params))
    model = AvsModel(cfg)
    rng = np.random.default_rng(seed)
    # make the zero-initialized temporal output projection live so its path is exercised
    model.visual.temporal.out_w.data[:] = rng.normal(0, 0.3, size=model.visual.temporal.out_w.shape)
    return model, clip


@dataclass
class CoordCheck:
    name: str
    analytic: float
    numeric: float

    @property
    def error(self) -> float:
        return rel_error(self.analytic, self.numeric, FLOOR)


def end_to_end_check(n_coords: int = 20, seed: int = 0, tol: float = E2E_TOL) -> tuple[GradCheckReport, list[CoordCheck]]:
    """Total loss of the micro model vs central differences on ``n_coords``
    parameter coordinates drawn round-robin from every top-level module.
    """
    with precision("f64"):
        model, clip = micro_setup(seed)
        named = list(model.named_parameters())
        groups: dict[str, list] = {}
        for n, p in named:
            groups.setdefault(n.split(".")[0], []).append((n, p))
        rng = np.random.default_rng(seed + 1)
        picks = []
        keys = sorted(groups)
        while len(picks) < n_coords:
            g = groups[keys[len(picks) % len(keys)]]
            n, p = g[int(rng.integers(len(g)))]
            picks.append((n, p, int(rng.integers(p.size))))
        model.zero_grad()
        checks = []
        with hold_stop_gradients() as start_replay:
            total, _, _ = model.loss(clip)
            backward(total)
            analytic = {id(p): p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for _, p in named}
            with no_grad():
                for n, p, j in picks:
                    flat = p.data.reshape(-1)
                    orig = flat[j]
                    flat[j] = orig + EPS
                    start_replay()
                    fp = float(model.loss(clip)[0].data)
                    flat[j] = orig - EPS
                    start_replay()
                    fm = float(model.loss(clip)[0].data)
                    flat[j] = orig
                    checks.append(CoordCheck(f"{n}[{j}]", float(analytic[id(p)].reshape(-1)[j]),
                                             (fp - fm) / (2 * EPS)))
        worst = max(c.error for c in checks)
        failures = [(c.name, c.analytic, c.numeric) for c in checks if not c.error <= tol]
        return GradCheckReport(worst, len(checks), tol, failures, "end-to-end micro model"), checks


def run_suite(include_end_to_end: bool = True) -> list[GradCheckReport]:
    reports = []
    with precision("f64"):
        for name, fn in _op_cases() + _block_cases():
            rep = fn()
            rep.name = rep.name or name
            reports.append(rep)
    if include_end_to_end:
        reports.append(end_to_end_check()[0])
    return reports
