"""Differentiable primitives for the segmentation and embedding networks.

Feature maps are NHWC. Convolution kernels are (kh, kw, in, out); transposed
convolution kernels are (kh, kw, out, in) so that a transposed convolution
with kernel ``w`` is exactly the adjoint of the strided convolution with the
same ``w``. Reductions accumulate in float64.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, record

L2_FLOOR = 1e-12


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0, dtype=np.float64)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True, dtype=np.float64)
    return g.reshape(shape)


def _cast(g, like: np.ndarray) -> np.ndarray:
    return np.asarray(g, dtype=like.dtype)


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = Tensor(a.data + b.data)
    return record(out, (a, b), lambda g: (_cast(_unbroadcast(g, a.shape), a.data),
                                          _cast(_unbroadcast(g, b.shape), b.data)))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = Tensor(a.data - b.data)
    return record(out, (a, b), lambda g: (_cast(_unbroadcast(g, a.shape), a.data),
                                          _cast(_unbroadcast(-g, b.shape), b.data)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = Tensor(a.data * b.data)

    def backward(g):
        return (_cast(_unbroadcast(g * b.data, a.shape), a.data),
                _cast(_unbroadcast(g * a.data, b.shape), b.data))

    return record(out, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0).astype(x.dtype))
    return record(out, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign to avoid overflow in exp
    z = x.data
    e = np.exp(-np.abs(z))
    y = np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    out = Tensor(y)
    return record(out, (x,), lambda g: (g * y * (1 - y),))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last (channel) axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = (e / e.sum(axis=-1, keepdims=True)).astype(x.dtype)
    out = Tensor(y)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record(out, (x,), backward)


# -- shape ------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return record(out, (x,), lambda g: (g.reshape(x.shape),))


def concat(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Concatenate along the channel axis (spatial extents must agree)."""
    if _concat_mismatch(a, b, axis):
        raise ValueError(f"concat: incompatible shapes {a.shape} and {b.shape} on axis {axis}")
    out = Tensor(np.concatenate([a.data, b.data], axis=axis))
    split = a.shape[axis]

    def backward(g):
        ga, gb = np.split(g, [split], axis=axis)
        return ga, gb

    return record(out, (a, b), backward)


def _concat_mismatch(a: Tensor, b: Tensor, axis: int) -> bool:
    if len(a.shape) != len(b.shape):
        return True
    ax = axis % len(a.shape)
    return any(i != ax and m != n for i, (m, n) in enumerate(zip(a.shape, b.shape)))


def take_channel(x: Tensor, c: int) -> Tensor:
    out = Tensor(x.data[..., c:c + 1])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[..., c:c + 1] = g
        return (gx,)

    return record(out, (x,), backward)


def crop2d(x: Tensor, top: int, left: int, h: int, w: int) -> Tensor:
    """Spatial window x[:, top:top+h, left:left+w, :]."""
    if top < 0 or left < 0 or top + h > x.shape[1] or left + w > x.shape[2]:
        raise ValueError(f"crop2d: window ({top}, {left}, {h}, {w}) outside input shape {x.shape}")
    out = Tensor(np.ascontiguousarray(x.data[:, top:top + h, left:left + w, :]))

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, top:top + h, left:left + w, :] = g
        return (gx,)

    return record(out, (x,), backward)


# -- reductions -------------------------------------------------------------

def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = Tensor(np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype))
    return record(out, (x,), lambda g: (np.full_like(x.data, g),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    out = Tensor(np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype))
    return record(out, (x,), lambda g: (np.full_like(x.data, g / n),))


# -- linear layers ----------------------------------------------------------

def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.size == 0:
        raise ValueError("dense: zero-length input")
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"dense: input {x.shape} does not match weights {w.shape}")
    y = x.data @ w.data
    if b is not None:
        y = y + b.data

    def backward(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, w.shape[1])
        if b is None:
            return gx, gw
        return gx, gw, _cast(g.reshape(-1, w.shape[1]).sum(axis=0, dtype=np.float64), b.data)

    inputs = (x, w) if b is None else (x, w, b)
    return record(Tensor(y), inputs, backward)


def _same_pads(n: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return out, total // 2, total - total // 2


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    cols = [xp[:, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride, :]
            for a in range(kh) for b in range(kw)]
    return np.concatenate(cols, axis=-1) if len(cols) > 1 else cols[0]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: str = "same", stride: int = 1) -> Tensor:
    """2-D cross-correlation, NHWC input, (kh, kw, in, out) kernel.

    ``same`` padding follows the usual ceil(n / stride) output convention
    with the extra pad row/column placed after; ``valid`` uses no padding.
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ValueError(f"conv2d: input shape {x.shape} incompatible with kernel shape {w.shape}")
    n, h, wd, c = x.shape
    kh, kw, _, k = w.shape
    if padding == "same":
        ho, pt, pb = _same_pads(h, kh, stride)
        wo, pl, pr = _same_pads(wd, kw, stride)
    elif padding == "valid":
        if h < kh or wd < kw:
            raise ValueError(f"conv2d: input shape {x.shape} smaller than kernel shape {w.shape}")
        ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    xp = x.data
    if pt or pb or pl or pr:
        xp = np.pad(xp, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.data.reshape(kh * kw * c, k)
    y = (cols.reshape(-1, kh * kw * c) @ wmat).reshape(n, ho, wo, k)
    if b is not None:
        y += b.data

    def backward(g):
        g2 = g.reshape(-1, k)
        gw = (cols.reshape(-1, kh * kw * c).T @ g2).reshape(w.shape)
        gcols = (g2 @ wmat.T).reshape(n, ho, wo, kh * kw * c)
        gxp = np.zeros_like(xp)
        idx = 0
        for a in range(kh):
            for bb in range(kw):
                gxp[:, a:a + stride * (ho - 1) + 1:stride, bb:bb + stride * (wo - 1) + 1:stride, :] += \
                    gcols[..., idx * c:(idx + 1) * c]
                idx += 1
        gx = gxp[:, pt:pt + h, pl:pl + wd, :]
        if b is None:
            return gx, gw
        return gx, gw, _cast(g2.sum(axis=0, dtype=np.float64), b.data)

    inputs = (x, w) if b is None else (x, w, b)
    return record(Tensor(y), inputs, backward)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2) -> Tensor:
    """Stride-2 transposed convolution doubling H and W; kernel (k, k, out, in).

    Adjoint of ``conv2d(., w, padding="same", stride=2)`` on inputs of twice
    the spatial size.
    """
    if stride != 2:
        raise ValueError(f"conv_transpose2d: only stride 2 is supported, got {stride}")
    if w.data.ndim != 4 or w.shape[0] != w.shape[1] or w.shape[0] not in (2, 3):
        raise ValueError(f"conv_transpose2d: unsupported kernel shape {w.shape} (need 2x2 or 3x3)")
    if x.data.ndim != 4 or x.shape[3] != w.shape[3]:
        raise ValueError(f"conv_transpose2d: input shape {x.shape} incompatible with kernel shape {w.shape}")
    n, h, wd, cin = x.shape
    ks, _, cout, _ = w.shape
    full_h, full_w = (h - 1) * 2 + ks, (wd - 1) * 2 + ks
    ho, pt, _ = _same_pads(2 * h, ks, 2)
    wo, pl, _ = _same_pads(2 * wd, ks, 2)
    full = np.zeros((n, full_h, full_w, cout), dtype=x.dtype)
    x2 = x.data.reshape(-1, cin)
    for a in range(ks):
        for bb in range(ks):
            full[:, a:a + 2 * h - 1:2, bb:bb + 2 * wd - 1:2, :] += (x2 @ w.data[a, bb].T).reshape(n, h, wd, cout)
    y = np.ascontiguousarray(full[:, pt:pt + 2 * h, pl:pl + 2 * wd, :])
    if b is not None:
        y += b.data

    def backward(g):
        gfull = np.zeros_like(full)
        gfull[:, pt:pt + 2 * h, pl:pl + 2 * wd, :] = g
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(w.data)
        for a in range(ks):
            for bb in range(ks):
                gs = gfull[:, a:a + 2 * h - 1:2, bb:bb + 2 * wd - 1:2, :].reshape(-1, cout)
                gx += (gs @ w.data[a, bb]).reshape(x.shape)
                gw[a, bb] = gs.T @ x2
        if b is None:
            return gx, gw
        return gx, gw, _cast(g.reshape(-1, cout).sum(axis=0, dtype=np.float64), b.data)

    inputs = (x, w) if b is None else (x, w, b)
    return record(Tensor(y), inputs, backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties route the gradient to the first element
    of the window in row-major order."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2: spatial dims must be even, got {x.shape}")
    win = x.data.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        onehot = np.zeros_like(win)
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        gx = onehot.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        return (gx,)

    return record(Tensor(y), (x,), backward)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over all but the last axis.

    In training mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    if x.size == 0:
        raise ValueError("batchnorm: zero-length input")
    axes = tuple(range(x.data.ndim - 1))
    if training:
        mu = x.data.mean(axis=axes, dtype=np.float64)
        var = x.data.var(axis=axes, dtype=np.float64)
        m = x.size // x.shape[-1]
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        # running variance uses the unbiased estimate
        running_var *= momentum
        running_var += (1 - momentum) * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean.astype(np.float64), running_var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((x.data - mu) * inv_std).astype(x.dtype)
    y = gamma.data * xhat + beta.data

    def backward(g):
        g64 = g.astype(np.float64)
        dgamma = _cast((g64 * xhat).sum(axis=axes), gamma.data)
        dbeta = _cast(g64.sum(axis=axes), beta.data)
        dxhat = g64 * gamma.data
        if training:
            m = x.size // x.shape[-1]
            dx = inv_std / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        else:
            dx = dxhat * inv_std
        return _cast(dx, x.data), dgamma, dbeta

    return record(Tensor(y.astype(x.dtype)), (x, gamma, beta), backward)


def l2_normalize(x: Tensor) -> Tensor:
    """Row-wise x / max(||x||, 1e-12) along the last axis."""
    if x.size == 0:
        raise ValueError("l2_normalize: zero-length input")
    norm = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, L2_FLOOR)
    y = (x.data / denom).astype(x.dtype)
    clamped = norm < L2_FLOOR

    def backward(g):
        proj = (g * y).sum(axis=-1, keepdims=True, dtype=np.float64)
        gx = np.where(clamped, g / denom, (g - y * proj) / denom)
        return (_cast(gx, x.data),)

    return record(Tensor(y), (x,), backward)


# -- losses -----------------------------------------------------------------

def soft_dice_loss(pred: Tensor, target, smooth: float = 1.0) -> Tensor:
    """1 - (2 sum(p t) + s) / (sum p + sum t + s), pooled over the whole batch."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ValueError(f"soft_dice_loss: pred shape {pred.shape} != target shape {t.shape}")
    p = pred.data.astype(np.float64)
    inter = (p * t).sum()
    denom = p.sum() + t.sum() + smooth
    num = 2 * inter + smooth
    loss = 1 - num / denom

    def backward(g):
        gp = -(2 * t * denom - num) / denom ** 2
        return (_cast(g * gp, pred.data),)

    return record(Tensor(np.asarray(loss, dtype=pred.dtype)), (pred,), backward)


def mse(x: Tensor, y: Tensor) -> Tensor:
    """Mean squared error; differentiable in both arguments."""
    y = as_tensor(y, like=x)
    if x.shape != y.shape:
        raise ValueError(f"mse: shapes {x.shape} and {y.shape} differ")
    d = x.data.astype(np.float64) - y.data
    n = d.size
    val = (d * d).sum() / n

    def backward(g):
        gd = 2 * g * d / n
        return _cast(gd, x.data), _cast(-gd, y.data)

    return record(Tensor(np.asarray(val, dtype=x.dtype)), (x, y), backward)


def triplet_loss(fa: Tensor, fp: Tensor, fn: Tensor, alpha: float = 1.0) -> Tensor:
    """Sum over the batch of max(0, |fa-fp|^2 - |fa-fn|^2 + alpha).

    At an argument of exactly zero the zero branch is taken.
    """
    if not (fa.shape == fp.shape == fn.shape):
        raise ValueError(f"triplet_loss: shapes {fa.shape}, {fp.shape}, {fn.shape} differ")
    a = fa.data.astype(np.float64)
    dp = a - fp.data
    dn = a - fn.data
    hinge = (dp * dp).sum(axis=-1) - (dn * dn).sum(axis=-1) + alpha
    active = (hinge > 0)[..., None]
    val = np.where(hinge > 0, hinge, 0.0).sum()

    def backward(g):
        ga = 2 * g * (dp - dn) * active
        gp = -2 * g * dp * active
        gn = 2 * g * dn * active
        return _cast(ga, fa.data), _cast(gp, fp.data), _cast(gn, fn.data)

    return record(Tensor(np.asarray(val, dtype=fa.dtype)), (fa, fp, fn), backward)
