"""Dense array ops with matched backward rules.

Every forward returns (output, cache); the paired ``*_backward`` consumes the
cache plus the output gradient and returns input/parameter gradients. All ops
use float64 and a fixed accumulation order, so results are bit-reproducible.
"""
from __future__ import annotations

import math

import numpy as np

EPS_NORM = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _reflect_indices(n: int, pad: int) -> np.ndarray:
    if n == 1:
        return np.zeros(1 + 2 * pad, dtype=int)
    if pad >= n:
        raise ShapeError(f"reflect pad {pad} too large for extent {n}")
    return np.concatenate([np.arange(pad, 0, -1), np.arange(n), np.arange(n - 2, n - 2 - pad, -1)])


def pad_reflect(x: np.ndarray, ph: int, pw: int):
    """Reflect-pad the first two axes. Returns (padded, cache)."""
    ih = _reflect_indices(x.shape[0], ph)
    iw = _reflect_indices(x.shape[1], pw)
    return x[np.ix_(ih, iw)], (x.shape, ih, iw)


def pad_reflect_backward(cache, gpad: np.ndarray) -> np.ndarray:
    shape, ih, iw = cache
    gx = np.zeros(shape, dtype=gpad.dtype)
    np.add.at(gx, (ih[:, None], iw[None, :]), gpad)
    return gx


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None, groups: int = 1):
    """Same-size 2D convolution with reflect padding.

    x: (H, W, Cin); w: (kh, kw, Cin // groups, Cout); b: (Cout,) or None.
    """
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d expects (H,W,Cin) and (kh,kw,Cin/g,Cout), got {x.shape} {w.shape}")
    H, W, cin = x.shape
    kh, kw, cg, cout = w.shape
    if cin != cg * groups:
        raise ShapeError(f"input channels {cin} != {cg} * groups {groups}")
    if cout % groups:
        raise ShapeError(f"output channels {cout} not divisible by groups {groups}")
    xp, pad_cache = pad_reflect(x, kh // 2, kw // 2)
    y = np.zeros((H, W, cout))
    gi, go = cin // groups, cout // groups
    for g in range(groups):
        xs = slice(g * gi, (g + 1) * gi)
        ys = slice(g * go, (g + 1) * go)
        for ki in range(kh):
            for kj in range(kw):
                y[:, :, ys] += xp[ki:ki + H, kj:kj + W, xs] @ w[ki, kj, :, ys]
    if b is not None:
        y += b
    return y, (xp, pad_cache, w, groups, b is not None)


def conv2d_backward(cache, gy: np.ndarray):
    xp, pad_cache, w, groups, has_b = cache
    kh, kw, cg, cout = w.shape
    H, W, _ = gy.shape
    cin = cg * groups
    gi, go = cin // groups, cout // groups
    gw = np.zeros(w.shape)
    gxp = np.zeros_like(xp)
    for g in range(groups):
        xs = slice(g * gi, (g + 1) * gi)
        ys = slice(g * go, (g + 1) * go)
        gys = gy[:, :, ys]
        for ki in range(kh):
            for kj in range(kw):
                patch = xp[ki:ki + H, kj:kj + W, xs]
                gw[ki, kj, :, ys] = np.einsum("hwc,hwd->cd", patch, gys)
                gxp[ki:ki + H, kj:kj + W, xs] += gys @ w[ki, kj, :, ys].T
    gx = pad_reflect_backward(pad_cache, gxp)
    gb = gy.sum(axis=(0, 1)) if has_b else None
    return gx, gw, gb


def conv_transpose2x2(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None):
    """Stride-2 transposed convolution with a 2x2 kernel (exact 2x upsampling).

    x: (h, w, cin); w: (2, 2, cin, cout) -> y: (2h, 2w, cout).
    """
    if w.shape[:2] != (2, 2) or x.shape[2] != w.shape[2]:
        raise ShapeError(f"conv_transpose2x2 got x {x.shape}, w {w.shape}")
    h, ww, cin = x.shape
    cout = w.shape[3]
    y = np.einsum("hwc,ijcd->hiwjd", x, w).reshape(2 * h, 2 * ww, cout)
    if b is not None:
        y = y + b
    return y, (x, w, b is not None)


def conv_transpose2x2_backward(cache, gy: np.ndarray):
    x, w, has_b = cache
    h, ww, cin = x.shape
    cout = w.shape[3]
    g = gy.reshape(h, 2, ww, 2, cout)
    gx = np.einsum("hiwjd,ijcd->hwc", g, w)
    gw = np.einsum("hwc,hiwjd->ijcd", x, g)
    gb = gy.sum(axis=(0, 1)) if has_b else None
    return gx, gw, gb


def matmul(a: np.ndarray, b: np.ndarray):
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    return a @ b, (a, b)


def matmul_backward(cache, gy: np.ndarray):
    a, b = cache
    return gy @ b.T, a.T @ gy


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None):
    """Channel-wise affine map over the last axis. x: (..., cin), w: (cin, cout)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear channel mismatch: {x.shape[-1]} vs {w.shape[0]}")
    y = x @ w
    if b is not None:
        y = y + b
    return y, (x, w, b is not None)


def linear_backward(cache, gy: np.ndarray):
    x, w, has_b = cache
    gx = gy @ w.T
    gw = x.reshape(-1, w.shape[0]).T @ gy.reshape(-1, w.shape[1])
    gb = gy.reshape(-1, w.shape[1]).sum(axis=0) if has_b else None
    return gx, gw, gb


def softmax(x: np.ndarray):
    """Softmax over the last axis; rows sum to one."""
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=-1, keepdims=True)
    return y, y


def softmax_backward(cache, gy: np.ndarray):
    y = cache
    return y * (gy - (gy * y).sum(axis=-1, keepdims=True))


def moment_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, axes):
    """Normalize to zero mean / unit variance over ``axes``; per-channel affine.

    gain/bias are broadcast against x (channels on the last axis).
    """
    axes = tuple(axes)
    mu = x.mean(axis=axes, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=axes, keepdims=True)
    s = np.sqrt(var + EPS_NORM)
    xhat = (x - mu) / s
    return xhat * gain + bias, (xhat, s, gain, axes)


def moment_norm_backward(cache, gy: np.ndarray):
    xhat, s, gain, axes = cache
    ghat = gy * gain
    gx = (ghat - ghat.mean(axis=axes, keepdims=True)
          - xhat * (ghat * xhat).mean(axis=axes, keepdims=True)) / s
    reduce_axes = tuple(i for i in range(gy.ndim) if i not in _gain_axes(gy, gain))
    ggain = (gy * xhat).sum(axis=reduce_axes)
    gbias = gy.sum(axis=reduce_axes)
    return gx, ggain.reshape(gain.shape), gbias.reshape(gain.shape)


def _gain_axes(x, gain):
    # gain lives on the trailing axes of x
    return tuple(range(x.ndim - gain.ndim, x.ndim))


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    """Normalization over the channel (last) axis."""
    return moment_norm(x, gain, bias, axes=(-1,))


layer_norm_backward = moment_norm_backward


def gap(x: np.ndarray):
    """Global average pooling over the two spatial axes. (H, W, C) -> (C,)."""
    if x.ndim != 3:
        raise ShapeError(f"gap expects (H,W,C), got {x.shape}")
    return x.mean(axis=(0, 1)), x.shape


def gap_backward(cache, gy: np.ndarray):
    H, W, C = cache
    return np.broadcast_to(gy / (H * W), (H, W, C)).copy()


_GELU_K = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray):
    inner = _GELU_K * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(cache, gy: np.ndarray):
    x, t = cache
    dinner = _GELU_K * (1.0 + 3 * 0.044715 * x ** 2)
    dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner
    return gy * dy


def numeric_gradient(f, x: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar f at x, elementwise."""
    g = np.zeros_like(x, dtype=float)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        fp = f(x)
        x[idx] = orig - step
        fm = f(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * step)
        it.iternext()
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(np.asarray(a).ravel())
    nb = np.linalg.norm(np.asarray(b).ravel())
    denom = max(na, nb)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm((np.asarray(a) - np.asarray(b)).ravel()) / denom)
