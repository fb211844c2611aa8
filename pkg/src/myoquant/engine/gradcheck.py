"""Central finite-difference checking for engine operations."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def numerical_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. ``x`` (perturbed in place)."""
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||), 0 when both vanish."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-3,
                    seed: int = 0) -> list[float]:
    """Compare tape gradients of ``fn(*inputs)`` against finite differences.

    Non-scalar outputs are contracted with a fixed random weighting so every
    output element contributes. Returns one relative error per input.
    """
    with Tape() as tape:
        out = fn(*inputs)
    weights = np.random.default_rng(seed).standard_normal(out.shape)

    def scalar() -> float:
        return float(np.sum(np.asarray(fn(*inputs).data, dtype=np.float64) * weights))

    analytic = tape.gradient(out, list(inputs), seed=weights)
    return [relative_error(g, numerical_gradient(scalar, t.data, eps)) for t, g in zip(inputs, analytic)]
