"""Differentiable operations on :class:`~pavsod.tensor.core.Tensor`.

Each op computes its forward result with numpy and registers a closure that
maps the output cotangent to input cotangents. In 64-bit mode contractions
accumulate over the inner dimension in index order, so ``matmul`` and
``conv2d`` reproduce a naive loop bit for bit; 32-bit mode uses BLAS.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ShapeError, Tensor, as_tensor, record


def _t(x) -> Tensor:
    return as_tensor(x)


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    nd = max(len(a), len(b))
    pa = (1,) * (nd - len(a)) + a
    pb = (1,) * (nd - len(b)) + b
    out = []
    for da, db in zip(pa, pb):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"shapes {a} and {b} are not broadcastable")
        out.append(max(da, db))
    return tuple(out)


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` back down to ``shape`` after size-1 expansion."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b),
                  lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b),
                  lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (unbroadcast(g / bd, ad.shape), unbroadcast(-g * ad / (bd * bd), bd.shape))

    return record("div", out, (a, b), back)


def neg(a) -> Tensor:
    a = _t(a)
    return record("neg", -a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = _t(a)
    ad = a.data
    p = float(exponent)
    return record("pow", ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def relu(a) -> Tensor:
    a = _t(a)
    mask = a.data > 0
    return record("relu", np.where(mask, a.data, 0.0).astype(a.data.dtype), (a,),
                  lambda g: (g * mask,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _t(a)
    y = _sigmoid_np(a.data)
    return record("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a) -> Tensor:
    a = _t(a)
    y = np.tanh(a.data)
    return record("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a) -> Tensor:
    a = _t(a)
    y = np.exp(a.data)
    return record("exp", y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = _t(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(ad)
    return record("log", y, (a,), lambda g: (g / ad,))


class _HeldValues:
    """Records stop-gradient outputs on one pass and replays them on later passes.

    Finite differences must treat a truncated value as a constant, exactly
    as backward does; see :func:`pavsod.tensor.gradcheck.hold_stop_gradients`.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.replay = False
        self.pos = 0

    def take(self, data: np.ndarray) -> np.ndarray:
        if not self.replay:
            self.values.append(data.copy())
            return data
        if self.pos >= len(self.values):
            raise RuntimeError("more stop_gradient calls than on the recorded pass")
        out = self.values[self.pos]
        self.pos += 1
        return out


_held: _HeldValues | None = None


def stop_gradient(a) -> Tensor:
    """Identity forward; contributes nothing to producers of ``a`` on backward."""
    a = _t(a)
    data = a.data if _held is None else _held.take(a.data)
    return Tensor(data, dtype=a.data.dtype)


def bce_with_logits(logits, target) -> Tensor:
    """Elementwise binary cross-entropy of ``sigmoid(logits)`` against ``target``.

    Evaluated as ``max(x, 0) - x*y + log1p(exp(-|x|))`` so saturated logits
    never hit ``log(0)``. The target is treated as a constant.
    """
    x = _t(logits)
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=x.data.dtype)
    if y.shape != x.shape:
        y = np.broadcast_to(y, x.shape)
    xd = x.data
    out = np.maximum(xd, 0) - xd * y + np.log1p(np.exp(-np.abs(xd)))
    p = _sigmoid_np(xd)
    return record("bce_with_logits", out, (x,), lambda g: (g * (p - y),))


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _t(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", np.asarray(out), (a,), back)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _t(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    shape = a.shape
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape).copy(),)

    return record("mean", np.asarray(out, dtype=a.data.dtype), (a,), back)


def reshape(a, shape) -> Tensor:
    a = _t(a)
    src = a.shape
    return record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = _t(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, index) -> Tensor:
    a = _t(a)
    shape, dtype = a.shape, a.data.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return record("getitem", np.array(a.data[index]), (a,), back)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_t(t) for t in tensors]
    nd = ts[0].ndim
    axis = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} along axis {axis}")
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        sl = [slice(None)] * nd
        outs = []
        for i in range(len(ts)):
            sl[axis] = slice(bounds[i], bounds[i + 1])
            outs.append(g[tuple(sl)])
        return outs

    return record("concat", np.concatenate([t.data for t in ts], axis=axis), ts, back)


def stack(tensors, axis: int = 0) -> Tensor:
    ts = [_t(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts]
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------------------
# contractions


def _ordered_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` accumulated over the inner index in order, without FMA."""
    k = a.shape[-1]
    out = a[..., :, 0:1] * b[..., 0:1, :]
    for i in range(1, k):
        out = out + a[..., :, i:i + 1] * b[..., i:i + 1, :]
    return out


def contract(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.dtype == np.float64 and b.dtype == np.float64:
        return _ordered_matmul(a, b)
    return np.matmul(a, b)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy-style broadcasting over leading batch dims."""
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data

    def back(g):
        ga = contract(g, np.swapaxes(bd, -1, -2))
        gb = contract(np.swapaxes(ad, -1, -2), g)
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return record("matmul", contract(ad, bd), (a, b), back)


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` for row-major activations (``x``: ...×D_in, ``w``: D_in×D_out)."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def softmax(x, axis: int = -1) -> Tensor:
    x = _t(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record("softmax", y, (x,), back)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine ``gamma``/``beta``."""
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def back(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        dgamma = unbroadcast(g * xhat, gd.shape)
        dbeta = unbroadcast(g, beta.data.shape)
        return dx, dgamma, dbeta

    return record("layer_norm", xhat * gd + beta.data, (x, gamma, beta), back)


# ---------------------------------------------------------------------------
# convolution, pooling, resampling


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (C×H×W or N×C×H×W) with ``w`` (C_out×C_in×k×k).

    Inner accumulation runs over (c_in, ky, kx) in row-major order.
    """
    x, w = _t(x), _t(w)
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or w.ndim != 4:
        raise ShapeError(f"conv2d expects C×H×W or N×C×H×W input and 4-D weight, got {x.shape}, {w.shape}")
    xd = x.data if batched else x.data[None]
    n, c, h, wd = xd.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {ci}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d needs a square odd kernel, got {kh}×{kw}")
    k, s, p = kh, int(stride), int(padding)
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    hp, wp = xp.shape[2], xp.shape[3]
    ho, wo = (hp - k) // s + 1, (wp - k) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}")
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)
    wm = w.data.reshape(co, c * k * k)
    out = contract(wm, cols).reshape(n, co, ho, wo)

    def back(g):
        g = g if batched else g[None]
        gm = g.reshape(n, co, ho * wo)
        gw = contract(gm, np.swapaxes(cols, 1, 2)).sum(axis=0).reshape(w.shape)
        gcols = contract(wm.T, gm).reshape(n, c, k, k, ho, wo)
        gxp = np.zeros((n, c, hp, wp), dtype=xd.dtype)
        for ky in range(k):
            for kx in range(k):
                gxp[:, :, ky:ky + s * ho:s, kx:kx + s * wo:s] += gcols[:, :, ky, kx]
        gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        if not batched:
            gx = gx[0]
        return np.ascontiguousarray(gx), gw

    return record("conv2d", out if batched else out[0], (x, w), back)


def pool(x, mode: str, window, axes) -> Tensor:
    """Non-overlapping max/avg pooling over ``axes`` with the given window sizes.

    Axis lengths not divisible by the window are floored; the ragged tail is
    dropped and receives zero gradient. Max pooling routes the gradient to
    the first maximal element in row-major window order.
    """
    x = _t(x)
    if mode not in ("max", "avg"):
        raise ValueError(f"pool mode must be 'max' or 'avg', got {mode!r}")
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(a % x.ndim for a in axes)
    if isinstance(window, int):
        window = (window,) * len(axes)
    window = tuple(int(v) for v in window)
    xd = x.data
    crop = [slice(None)] * x.ndim
    for a, wv in zip(axes, window):
        crop[a] = slice(0, (xd.shape[a] // wv) * wv)
    xc = xd[tuple(crop)]
    split_shape: list[int] = []
    for i, d in enumerate(xc.shape):
        if i in axes:
            wv = window[axes.index(i)]
            split_shape += [d // wv, wv]
        else:
            split_shape.append(d)
    xs = xc.reshape(split_shape)
    win_pos = []
    pos = 0
    for i in range(x.ndim):
        if i in axes:
            win_pos.append(pos + 1)
            pos += 2
        else:
            pos += 1
    keep = [i for i in range(len(split_shape)) if i not in win_pos]
    xt = xs.transpose(keep + win_pos)
    outer = xt.shape[:len(keep)]
    flat = xt.reshape(outer + (-1,))
    wtot = flat.shape[-1]
    inv_perm = np.argsort(keep + win_pos)

    if mode == "max":
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    else:
        out = flat.mean(axis=-1)

    def back(g):
        if mode == "max":
            gf = np.zeros(flat.shape, dtype=xd.dtype)
            np.put_along_axis(gf, idx[..., None], g[..., None], axis=-1)
        else:
            gf = np.broadcast_to((g / wtot)[..., None], flat.shape)
        gs = gf.reshape(xt.shape).transpose(inv_perm).reshape(xc.shape)
        full = np.zeros(xd.shape, dtype=xd.dtype)
        full[tuple(crop)] = gs
        return (full,)

    return record(f"{mode}_pool", out, (x,), back)


def upsample_nearest(x, factor: int) -> Tensor:
    """Repeat the last two axes ``factor`` times."""
    x = _t(x)
    f = int(factor)
    xd = x.data
    out = np.repeat(np.repeat(xd, f, axis=-2), f, axis=-1)
    h, w = xd.shape[-2:]

    def back(g):
        return (g.reshape(g.shape[:-2] + (h, f, w, f)).sum(axis=(-3, -1)),)

    return record("upsample_nearest", out, (x,), back)


def bilinear_matrix(n_in: int, n_out: int, dtype=None) -> np.ndarray:
    """Half-pixel-aligned linear interpolation matrix (n_out × n_in), edge-clamped."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[o, lo] += 1.0 - frac
        m[o, hi] += frac
    return m.astype(dtype or np.float64)


def upsample_bilinear(x, factor: int) -> Tensor:
    """Separable bilinear upsampling of the last two axes, as two matmuls."""
    x = _t(x)
    h, w = x.shape[-2:]
    ah = Tensor(bilinear_matrix(h, h * factor), dtype=x.data.dtype)
    awt = Tensor(bilinear_matrix(w, w * factor).T, dtype=x.data.dtype)
    return matmul(matmul(ah, x), awt)


# ---------------------------------------------------------------------------
# recurrent


def gru(x, w, u, b, reverse: bool = False) -> Tensor:
    """Single-direction GRU over a T×D sequence; returns T×Q hidden states.

    ``w``: D×3Q input weights, ``u``: Q×3Q recurrent weights, ``b``: 3Q bias,
    gate blocks ordered (update z, reset r, candidate n)::

        z = σ(x W_z + h U_z + b_z)      r = σ(x W_r + h U_r + b_r)
        n = tanh(x W_n + (r ⊙ h) U_n + b_n)
        h' = (1 - z) ⊙ n + z ⊙ h
    """
    x, w, u, b = _t(x), _t(w), _t(u), _t(b)
    xd, wd, ud, bd = x.data, w.data, u.data, b.data
    steps, _ = xd.shape
    q = ud.shape[0]
    if wd.shape[1] != 3 * q or ud.shape != (q, 3 * q) or bd.shape != (3 * q,):
        raise ShapeError(f"gru params inconsistent: w {wd.shape}, u {ud.shape}, b {bd.shape}")
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    xa = xd @ wd + bd
    uz, ur, un = ud[:, :q], ud[:, q:2 * q], ud[:, 2 * q:]
    hs = np.zeros((steps, q), dtype=xd.dtype)
    cache = []
    h = np.zeros(q, dtype=xd.dtype)
    for t in order:
        a = xa[t]
        z = _sigmoid_np(a[:q] + h @ uz)
        r = _sigmoid_np(a[q:2 * q] + h @ ur)
        rh = r * h
        n = np.tanh(a[2 * q:] + rh @ un)
        h_new = (1.0 - z) * n + z * h
        cache.append((t, h, z, r, rh, n))
        hs[t] = h_new
        h = h_new

    def back(g):
        dxa = np.zeros_like(xa)
        du = np.zeros_like(ud)
        dh_next = np.zeros(q, dtype=xd.dtype)
        for t, h_prev, z, r, rh, n in reversed(cache):
            dh = g[t] + dh_next
            dn = dh * (1.0 - z)
            dz = dh * (h_prev - n)
            dh_prev = dh * z
            dan = dn * (1.0 - n * n)
            du[:, 2 * q:] += np.outer(rh, dan)
            drh = dan @ un.T
            dr = drh * h_prev
            dh_prev += drh * r
            dar = dr * r * (1.0 - r)
            daz = dz * z * (1.0 - z)
            du[:, :q] += np.outer(h_prev, daz)
            du[:, q:2 * q] += np.outer(h_prev, dar)
            dh_prev += daz @ uz.T + dar @ ur.T
            dxa[t, :q] = daz
            dxa[t, q:2 * q] = dar
            dxa[t, 2 * q:] = dan
            dh_next = dh_prev
        return dxa @ wd.T, xd.T @ dxa, du, dxa.sum(axis=0)

    return record("gru", hs, (x, w, u, b), back)


def gru_bidirectional(x, fwd: tuple, bwd: tuple) -> Tensor:
    """Forward and reversed GRU passes concatenated per step (T×2Q)."""
    return concat([gru(x, *fwd), gru(x, *bwd, reverse=True)], axis=1)
