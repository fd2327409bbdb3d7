"""Attention building blocks shared by the visual transformer and the fusion blocks.

Activations are token-major (``... × S × C``); leading dims are batch dims.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, ops
from .tensor.nn import LayerNorm, Linear, Module


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, s, d = x.shape
    x = ops.reshape(x, (*lead, s, n_heads, d // n_heads))
    nd = len(lead)
    return ops.transpose(x, (*range(nd), nd + 1, nd, nd + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, s, dh = x.shape
    nd = len(lead)
    x = ops.transpose(x, (*range(nd), nd + 1, nd, nd + 2))
    return ops.reshape(x, (*lead, s, h * dh))


class MultiHeadAttention(Module):
    """Queries from ``x_q`` (…×S×D_q), keys/values from ``x_kv`` (…×L×D_kv).

    Per head: ``softmax(Q Kᵀ / √d_head) V``; heads are concatenated and
    projected back to ``D_q`` channels.
    """

    def __init__(self, rng: np.random.Generator, d_q: int, d_kv: int, n_heads: int, d_model: int | None = None):
        d_model = d_model or d_q
        if d_model % n_heads:
            raise ValueError(f"model width {d_model} is not divisible by {n_heads} heads")
        self.q = Linear(rng, d_q, d_model)
        self.k = Linear(rng, d_kv, d_model)
        self.v = Linear(rng, d_kv, d_model)
        self.o = Linear(rng, d_model, d_q)
        self._heads = n_heads

    @property
    def n_heads(self) -> int:
        return self._heads

    def weights(self, x_q: Tensor, x_kv: Tensor) -> tuple[Tensor, Tensor]:
        """Attention weights (…×h×S×L) and per-head values (…×h×L×d_head)."""
        q = _split_heads(self.q(x_q), self._heads)
        k = _split_heads(self.k(x_kv), self._heads)
        v = _split_heads(self.v(x_kv), self._heads)
        nd = k.ndim
        scores = ops.matmul(q, ops.transpose(k, (*range(nd - 2), nd - 1, nd - 2)))
        scores = scores * (1.0 / math.sqrt(q.shape[-1]))
        return ops.softmax(scores, axis=-1), v

    def __call__(self, x_q: Tensor, x_kv: Tensor) -> Tensor:
        attn, v = self.weights(x_q, x_kv)
        return self.o(_merge_heads(ops.matmul(attn, v)))


class FeedForward(Module):
    def __init__(self, rng: np.random.Generator, d: int, hidden: int):
        self.fc1 = Linear(rng, d, hidden)
        self.fc2 = Linear(rng, hidden, d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.relu(self.fc1(x)))


class AttentionLayer(Module):
    """Post-norm attention layer: ``h = LN(attn(x, ctx) + x)``, ``out = LN(FFN(h) + h)``."""

    def __init__(self, rng: np.random.Generator, d: int, d_ctx: int, n_heads: int, ffn_mult: int = 2):
        self.attn = MultiHeadAttention(rng, d, d_ctx, n_heads)
        self.norm1 = LayerNorm(d)
        self.ffn = FeedForward(rng, d, ffn_mult * d)
        self.norm2 = LayerNorm(d)

    def __call__(self, x: Tensor, ctx: Tensor | None = None) -> Tensor:
        h = self.norm1(self.attn(x, x if ctx is None else ctx) + x)
        return self.norm2(self.ffn(h) + h)
