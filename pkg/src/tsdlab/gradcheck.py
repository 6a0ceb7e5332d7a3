"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckResult:
    name: str
    rel_error: float
    analytic_norm: float
    numeric_norm: float

    def ok(self, tol: float) -> bool:
        return self.rel_error < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)``.

    The floor turns the check absolute for gradients that are (near) zero,
    where any relative comparison would only measure rounding noise.
    """
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_grad(fn: Callable[[], Tensor], p: Tensor, eps: float = 1e-5,
                 entries: np.ndarray | None = None) -> np.ndarray:
    flat = p.data.reshape(-1)
    out = np.zeros(flat.size)
    idx = range(flat.size) if entries is None else entries
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = fn().item()
            flat[i] = orig - eps
            down = fn().item()
            flat[i] = orig
            out[i] = (up - down) / (2 * eps)
    return out.reshape(p.shape)


def gradcheck(fn: Callable[[], Tensor], params: Sequence[tuple[str, Tensor]], eps: float = 1e-5,
              max_entries: int | None = None, rng: np.random.Generator | None = None) -> list[GradCheckResult]:
    """Compare backward() gradients of ``fn`` against central differences.

    ``max_entries`` caps how many coordinates of each parameter are probed;
    the analytic gradient is compared only on the probed coordinates.
    Rounding noise in a central difference is about ``|f| * 1e-16 / eps``, so
    gradients are compared absolutely below a norm of ``1e-6 * max(1, |f|)``.
    """
    for _, p in params:
        p.grad = None
    loss = fn()
    loss.backward()
    floor = 1e-6 * max(1.0, abs(loss.item()))
    results = []
    for name, p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        entries = None
        if max_entries is not None and p.size > max_entries:
            rng = rng or np.random.default_rng(0)
            entries = np.sort(rng.choice(p.size, size=max_entries, replace=False))
        numeric = numeric_grad(fn, p, eps, entries)
        if entries is not None:
            a = analytic.reshape(-1)[entries]
            n = numeric.reshape(-1)[entries]
        else:
            a, n = analytic, numeric
        results.append(GradCheckResult(name, relative_error(a, n, floor), float(np.linalg.norm(a)),
                                       float(np.linalg.norm(n))))
    for _, p in params:
        p.grad = None
    return results
