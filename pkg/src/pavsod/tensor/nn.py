"""Parameter containers shared by the model components."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .core import Tensor, default_dtype


def param(arr) -> Tensor:
    return Tensor(np.asarray(arr), requires_grad=True, dtype=default_dtype())


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return param(rng.uniform(-limit, limit, size=shape))


def he(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    return param(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))


def zeros(shape) -> Tensor:
    return param(np.zeros(shape))


def ones(shape) -> Tensor:
    return param(np.ones(shape))


class Module:
    """Discovers parameters by walking attributes (tensors, modules, lists of modules)."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, p in own.items():
            if k in state:
                arr = np.asarray(state[k])
                if arr.shape != p.shape:
                    raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
                p.data = arr.astype(p.data.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.w = glorot(rng, d_in, d_out, (d_in, d_out))
        self.b = zeros((d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = ones((dim,))
        self.beta = zeros((dim,))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self._eps)


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int = 3,
                 stride: int = 1, bias: bool = True):
        self.w = he(rng, c_in * k * k, (c_out, c_in, k, k))
        self.b = zeros((c_out, 1, 1)) if bias else None
        self._stride = stride
        self._pad = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.conv2d(x, self.w, stride=self._stride, padding=self._pad)
        return y if self.b is None else ops.add(y, self.b)
