import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pavsod.objective import (LossWeights, adaptive_fbeta, bce_loss, combine_losses, dice_loss, distill_loss, mae,
                              structure_loss, total_loss)
from pavsod.tensor import Tensor, backward, grad_check, ops, precision


@pytest.fixture(autouse=True)
def f64():
    with precision("f64"):
        yield


def test_defaults():
    w = LossWeights()
    assert (w.lambda_distill, w.lambda_dice) == (5.0, 1.0)
    with pytest.raises(ValueError):
        LossWeights(-1.0)


def test_bce_closed_forms(rng):
    gt = (rng.random((1, 1, 4, 4)) > 0.5).astype(float)
    assert math.isclose(float(bce_loss(Tensor(np.zeros(gt.shape)), gt).data), math.log(2), rel_tol=1e-12)
    assert float(bce_loss(Tensor(60.0 * (2 * gt - 1)), gt).data) < 1e-20


def test_bce_scalar_loop(rng):
    x = rng.normal(size=(1, 1, 4, 4))
    gt = (rng.random(x.shape) > 0.5).astype(float)
    want = 0.0
    for v, g in zip(x.ravel(), gt.ravel()):
        p = 1 / (1 + math.exp(-v))
        want -= g * math.log(p) + (1 - g) * math.log(1 - p)
    assert math.isclose(float(bce_loss(Tensor(x), gt).data), want / 16, rel_tol=1e-12)


def test_dice_cases():
    ones, zeros = np.ones((1, 1, 4, 4)), np.zeros((1, 1, 4, 4))
    assert float(dice_loss(Tensor(ones), ones).data) == pytest.approx(0, abs=1e-12)
    assert float(dice_loss(Tensor(zeros), ones).data) == pytest.approx(1 - 1 / 17)
    assert float(dice_loss(Tensor(zeros), zeros).data) == 0.0


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_dice_monotone_toward_gt(seed):
    r = np.random.default_rng(seed)
    gt = (r.random((1, 1, 4, 4)) > 0.5).astype(float)
    p0 = r.random(gt.shape)
    vals = [float(dice_loss(Tensor(p0 + a * (gt - p0)), gt).data) for a in np.linspace(0, 1, 6)]
    assert all(0 <= v <= 1 for v in vals)
    assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))


def test_structure_loss_reductions(rng):
    x = rng.normal(size=(3, 1, 4, 4))
    gt = (rng.random(x.shape) > 0.5).astype(float)
    one = structure_loss(Tensor(x[:1]), gt[:1], 1.0).data
    assert np.isclose(one, bce_loss(Tensor(x[:1]), gt[:1]).data + dice_loss(ops.sigmoid(Tensor(x[:1])), gt[:1]).data)
    pure = structure_loss(Tensor(x), gt, 0.0).data
    assert np.isclose(pure, sum(bce_loss(Tensor(x[t:t + 1]), gt[t:t + 1]).data for t in range(3)))
    dice_sum = sum(dice_loss(ops.sigmoid(Tensor(x[t:t + 1])), gt[t:t + 1]).data for t in range(3))
    assert np.isclose(structure_loss(Tensor(x), gt, 2.5).data - pure, 2.5 * dice_sum, rtol=1e-12)
    perm = [2, 0, 1]
    assert np.isclose(structure_loss(Tensor(x[perm]), gt[perm], 1.0).data, structure_loss(Tensor(x), gt, 1.0).data)
    with pytest.raises(ValueError):
        structure_loss(Tensor(x), gt[:2])


def test_distill_values(rng):
    a = rng.normal(size=(3, 2, 2, 2))
    assert float(distill_loss(Tensor(a), Tensor(a)).data) == 0.0
    assert float(distill_loss(Tensor(a + 1), Tensor(a)).data) == pytest.approx(3.0)
    with pytest.raises(ValueError):
        distill_loss(Tensor(a), Tensor(a[:2]))


def test_distill_gradient_closed_form(rng):
    s = Tensor(rng.normal(size=(2, 3, 2, 2)), requires_grad=True)
    t = Tensor(rng.normal(size=s.shape), requires_grad=True)
    backward(distill_loss(s, t))
    assert np.allclose(s.grad, 2 * (s.data - t.data) / 12, atol=1e-14)
    assert t.grad is None or not t.grad.any()
    assert grad_check(lambda u: distill_loss(u, Tensor(t.data)), [s], tol=1e-5).passed


def test_total_loss_arithmetic():
    r = total_loss(1.0, 2.0, 3.0)
    assert r.total == 18.0
    assert total_loss(0, 0, 0).total == 0.0
    assert total_loss(1.0, 2.0, 3.0, LossWeights(0.0)).total == 3.0
    with pytest.raises(FloatingPointError):
        total_loss(float("nan"), 0.0, 0.0)


def test_combine_losses_report_matches_tensor(rng):
    parts = [Tensor(np.array(v)) for v in (0.7, 0.3, 0.125)]
    total, rep = combine_losses(*parts, LossWeights())
    assert float(total.data) == rep.total == (0.7 + 0.3) + 5.0 * 0.125
    with pytest.raises(FloatingPointError):
        combine_losses(Tensor(np.array(np.inf)), None, None, LossWeights())


def test_mae(rng):
    p, g = rng.random((4, 4)), (rng.random((4, 4)) > 0.5).astype(float)
    assert mae(g, g) == 0.0
    assert mae(np.ones(4), np.zeros(4)) == 1.0
    assert math.isclose(mae(p, g), sum(abs(a - b) for a, b in zip(p.ravel(), g.ravel())) / 16, rel_tol=1e-12)


def test_fbeta_cases(rng):
    g = (rng.random((8, 8)) > 0.5).astype(float)
    assert adaptive_fbeta(g, g) == pytest.approx(1.0)
    assert adaptive_fbeta(np.zeros((8, 8)), g) == 0.0
    assert adaptive_fbeta(rng.random((8, 8)), np.zeros((8, 8))) is None


def test_fbeta_scalar_loop(rng):
    p = rng.random((6, 6)) ** 2
    g = rng.random((6, 6)) > 0.6
    thr = min(2 * sum(p.ravel()) / 36, 1.0)
    tp = fp = fn = 0
    for pv, gv in zip(p.ravel(), g.ravel()):
        pos = pv >= thr
        tp += pos and gv
        fp += pos and not gv
        fn += (not pos) and gv
    prec, rec = tp / (tp + fp), tp / (tp + fn)
    want = 1.3 * prec * rec / (0.3 * prec + rec)
    assert adaptive_fbeta(p, g) == pytest.approx(want, rel=1e-12)


def test_loss_gradients(rng):
    logits = Tensor(rng.normal(size=(2, 1, 4, 4)), requires_grad=True)
    gt = (rng.random(logits.shape) > 0.5).astype(float)
    rep = grad_check(lambda x: structure_loss(x, gt, 1.0), [logits], tol=1e-5)
    assert rep.passed, rep.failures
