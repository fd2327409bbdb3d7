"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import ops
from .core import Tensor, backward, no_grad


@contextmanager
def hold_stop_gradients() -> Iterator[Callable[[], None]]:
    """Freeze stop-gradient outputs at their values from the first pass.

    Yields a function that switches from recording to replay; every later
    forward pass then sees the recorded constants, so central differences
    differentiate the same surrogate that backward does.
    """
    held = ops._HeldValues()
    prev = ops._held
    ops._held = held

    def start_replay():
        held.replay = True
        held.pos = 0

    try:
        yield start_replay
    finally:
        ops._held = prev


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    tol: float
    failures: list[tuple[int, tuple, float, float]] = field(default_factory=list)
    name: str = ""

    @property
    def passed(self) -> bool:
        return not self.failures and np.isfinite(self.max_rel_error)

    def __str__(self) -> str:
        status = "ok" if self.passed else f"FAIL ({len(self.failures)} coords)"
        label = f"{self.name}: " if self.name else ""
        return f"{label}{status} max_rel={self.max_rel_error:.3e} over {self.checked} coords (tol {self.tol:g})"


def rel_error(a: float, n: float, floor: float = 1e-7) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-7,
    name: str = "",
    hold: bool = False,
) -> GradCheckReport:
    """Compare ``backward`` gradients of scalar ``f(*inputs)`` with central differences.

    Args:
        f: deterministic function returning a scalar tensor.
        inputs: tensors to perturb; each must have ``requires_grad=True``.
        eps: perturbation size.
        tol: relative-error threshold per coordinate.
        max_coords: if set, check at most this many coordinates per input,
            sampled without replacement with ``seed``.
        floor: lower bound of the relative-error denominator.
        hold: keep stop-gradient outputs fixed at their unperturbed values
            (needed whenever ``f`` truncates a path that depends on ``inputs``).
    """
    if hold:
        with hold_stop_gradients() as start_replay:
            return _grad_check(f, inputs, eps, tol, max_coords, seed, floor, name, start_replay)
    return _grad_check(f, inputs, eps, tol, max_coords, seed, floor, name, None)


def _grad_check(f, inputs, eps, tol, max_coords, seed, floor, name, start_replay) -> GradCheckReport:
    for t in inputs:
        t.zero_grad()
    out = f(*inputs)
    backward(out)
    if start_replay is not None:
        start_replay()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    failures = []
    with no_grad():
        for i, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for j in coords:
                orig = flat[j]
                flat[j] = orig + eps
                if start_replay is not None:
                    start_replay()
                fp = float(f(*inputs).data)
                flat[j] = orig - eps
                if start_replay is not None:
                    start_replay()
                fm = float(f(*inputs).data)
                flat[j] = orig
                num = (fp - fm) / (2 * eps)
                ana = float(analytic[i].reshape(-1)[j])
                err = rel_error(ana, num, floor)
                worst = max(worst, err)
                checked += 1
                if not err <= tol:
                    failures.append((i, np.unravel_index(j, t.shape), ana, num))
    for t in inputs:
        t.zero_grad()
    return GradCheckReport(worst, checked, tol, failures, name)
