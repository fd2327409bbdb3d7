"""Adam with decoupled weight decay."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import Tensor


class AdamW:
    """``p ← p − lr·(m̂ / (√v̂ + eps) + wd·p)`` with bias-corrected moments."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grad_scale: float = 1.0) -> None:
        grads = []
        for p in self.params:
            g = np.zeros_like(p.data) if p.grad is None else p.grad * grad_scale
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient; aborting optimizer step")
            grads.append(g)
        step = self.step_count + 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** step
        c2 = 1.0 - b2 ** step
        staged = []
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m_new = b1 * m + (1.0 - b1) * g
            v_new = b2 * v + (1.0 - b2) * g * g
            update = (m_new / c1) / (np.sqrt(v_new / c2) + self.eps) + self.weight_decay * p.data
            with np.errstate(over="ignore", invalid="ignore"):
                p_new = (p.data - self.lr * update).astype(p.data.dtype)
            if not np.all(np.isfinite(p_new)):
                raise FloatingPointError("optimizer step produced non-finite parameters; state left unchanged")
            staged.append((m_new, v_new, p_new))
        # commit only once every parameter is known to be finite
        for i, (p, (m_new, v_new, p_new)) in enumerate(zip(self.params, staged)):
            self.m[i], self.v[i], p.data = m_new, v_new, p_new
        self.step_count = step

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state(self, state: dict[str, np.ndarray], step_count: int) -> None:
        for i in range(len(self.params)):
            self.m[i] = np.array(state[f"m.{i}"], dtype=self.params[i].data.dtype)
            self.v[i] = np.array(state[f"v.{i}"], dtype=self.params[i].data.dtype)
        self.step_count = step_count
