"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numerical_gradient(f: Callable[[], Tensor], x: Tensor, step: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to every entry of ``x``.

    ``x`` is perturbed in place and restored; ``f`` must re-read ``x.data``.
    """
    grad = np.zeros_like(x.data)
    base = x.data.copy()
    flat = base.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += step
        x.data = bumped.reshape(base.shape)
        up = float(f().data)
        bumped[i] -= 2 * step
        x.data = bumped.reshape(base.shape)
        down = float(f().data)
        grad.reshape(-1)[i] = (up - down) / (2 * step)
    x.data = base
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` keeps entries whose true gradient is ~0 from dividing noise by noise.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradients(
    f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-4, floor: float = 1e-6
) -> dict[str, float]:
    """Compare backprop gradients of ``f`` against central differences.

    Returns the worst relative error per parameter, keyed by ``name`` (or index).
    """
    for p in params:
        p.zero_grad()
    backward(f(), inputs=params)
    report = {}
    for i, p in enumerate(params):
        numeric = numerical_gradient(f, p, step)
        report[p.name or str(i)] = relative_error(p.grad, numeric, floor)
    return report
