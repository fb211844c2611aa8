"""Tensor container and the gradient tape that records operations on it."""

from __future__ import annotations

import numpy as np

_TAPES: list["Tape"] = []


class Tensor:
    """n-dimensional float array that can take part in gradient recording.

    Data is stored row-major as float32 unless a float64 array is passed in
    (gradient checks run the same code in double precision).
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float32, copy=False)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # arithmetic sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)


class Parameter(Tensor):
    """A trainable tensor; always requires grad."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


class Tape:
    """Ordered record of primitive operations for reverse-mode differentiation.

    Use as a context manager; operations executed inside the block whose inputs
    require grad are appended in execution order. ``gradient`` replays them in
    exact reverse order, which is a valid reverse topological order because an
    operation can only consume tensors produced before it.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self.parameters: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        self.records.append((out, inputs, backward))
        for t in inputs:
            if isinstance(t, Parameter):
                self.parameters.setdefault(id(t), t)

    def gradient(self, target: Tensor, sources, seed=None) -> list[np.ndarray]:
        """Gradients of ``target`` w.r.t. each tensor in ``sources``.

        Sources the target does not depend on get an all-zero gradient.
        """
        if seed is None:
            if target.size != 1:
                raise ValueError(f"gradient needs a scalar target or an explicit seed, got shape {target.shape}")
            seed = np.ones_like(target.data)
        keep = {id(s) for s in sources}
        grads: dict[int, np.ndarray] = {id(target): np.asarray(seed, dtype=target.dtype).reshape(target.shape)}
        for out, inputs, backward in reversed(self.records):
            g = grads.get(id(out)) if id(out) in keep else grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = backward(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def record(out: Tensor, inputs: tuple[Tensor, ...], backward) -> Tensor:
    """Attach ``backward`` to every active tape if any input requires grad."""
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        for tape in _TAPES:
            tape.record(out, inputs, backward)
    return out
