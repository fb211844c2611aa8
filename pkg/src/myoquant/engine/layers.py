"""Parameterized layers built on the primitives in :mod:`ops`."""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    """Base class: collects parameters and non-trainable buffers by name."""

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out = []
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                out.append((name, val))
            elif isinstance(val, Layer):
                out.extend(val.named_parameters(name + "."))
            elif isinstance(val, list) and val and isinstance(val[0], Layer):
                for i, sub in enumerate(val):
                    out.extend(sub.named_parameters(f"{name}.{i}."))
        return out

    def named_buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = []
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Layer):
                out.extend(val.named_buffers(name + "."))
            elif isinstance(val, list) and val and isinstance(val[0], Layer):
                for i, sub in enumerate(val):
                    out.extend(sub.named_buffers(f"{name}.{i}."))
        return out

    def state(self) -> dict[str, np.ndarray]:
        """All parameters and buffers, in a stable order."""
        items = {name: p.data for name, p in self.named_parameters()}
        items.update(self.named_buffers())
        return items

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"checkpoint is missing entries: {sorted(missing)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {state[name].shape} != model shape {p.shape}")
            p.data = np.ascontiguousarray(state[name], dtype=p.dtype)
        for name, buf in buffers.items():
            buf[...] = state[name]


class Conv2D(Layer):
    def __init__(self, cin: int, cout: int, k: int = 3, rng=None, padding: str = "same", dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.padding = padding
        self.w = Parameter(he_uniform(rng, (k, k, cin, cout), k * k * cin, dtype))
        self.b = Parameter(np.zeros(cout, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.w, self.b, padding=self.padding)


class ConvTranspose2D(Layer):
    def __init__(self, cin: int, cout: int, k: int = 2, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.w = Parameter(he_uniform(rng, (k, k, cout, cin), k * k * cin, dtype))
        self.b = Parameter(np.zeros(cout, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.w, self.b)


class Dense(Layer):
    def __init__(self, din: int, dout: int, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.w = Parameter(he_uniform(rng, (din, dout), din, dtype))
        self.b = Parameter(np.zeros(dout, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.dense(x, self.w, self.b)


class BatchNorm(Layer):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self.momentum = momentum
        self.eps = eps

    def named_buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        return [(f"{prefix}running_mean", self.running_mean), (f"{prefix}running_var", self.running_var)]

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return ops.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             training, self.momentum, self.eps)
