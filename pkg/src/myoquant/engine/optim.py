from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter


class NumericalError(FloatingPointError):
    """Raised when a NaN/inf shows up in gradients or losses."""


@dataclass
class AdamState:
    """Adam hyper-parameters and per-parameter moment buffers.

    Defaults are the standard ones: lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    v: dict[int, np.ndarray] = field(default_factory=dict, repr=False)


def adam_step(params: list[Parameter], grads: list[np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ValueError(f"adam_step: {len(params)} parameters but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != parameter shape {p.shape} ({p.name or i})")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"adam_step: non-finite gradient for parameter {p.name or i}")
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros(p.shape, dtype=np.float64)
            state.v[i] = np.zeros(p.shape, dtype=np.float64)
        v = state.v[i]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * np.square(g, dtype=np.float64)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.data = (p.data - update).astype(p.dtype)
