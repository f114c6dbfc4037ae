"""Dense kernels shared by the rest of the package.

Layout conventions (fixed):
  * matrices are 2-D row-major arrays ``(rows, cols)``;
  * spatial grids are ``(H, W, C)`` arrays, channels last, row-major over
    pixels so that token index ``i = y * W + x``.

All kernels work in float64 unless the caller hands in float32.
"""

import numpy as np

from .errors import DomainError, ShapeError

LN_EPS = 1e-5
ROW_SUM_TOL = 1e-6


def matmul(a, b):
    """Matrix product with a fixed accumulation order.

    The sum over the inner index runs k = 0, 1, ..., K-1 left to right
    with no fused multiply-add, so the result is bit-identical to a naive
    triple loop and stable across platforms.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    dtype = np.result_type(a, b, np.float32)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=dtype)
    for k in range(a.shape[1]):
        out += np.multiply.outer(a[:, k], b[k, :]).astype(dtype, copy=False)
    return out


def softmax_rows(m, scale=1.0):
    """Row-wise softmax of ``m / scale`` using max subtraction."""
    m = np.asarray(m)
    if scale <= 0:
        raise DomainError(f"softmax scale must be positive, got {scale}")
    if not np.all(np.isfinite(m)):
        raise DomainError("softmax input contains non-finite values")
    z = m / scale
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def check_row_stochastic(a, tol=ROW_SUM_TOL):
    a = np.asarray(a)
    if np.any(a < 0) or np.max(np.abs(a.sum(axis=-1) - 1.0)) > tol:
        raise DomainError("attention rows are not stochastic")
    return a


def layer_norm(v, gain, bias, eps=LN_EPS):
    """Normalize over the last axis, then apply ``gain * x + bias``."""
    v = np.asarray(v)
    gain = np.asarray(gain)
    bias = np.asarray(bias)
    d = v.shape[-1]
    if d < 1 or gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm shapes disagree: v{v.shape}, gain{gain.shape}, bias{bias.shape}")
    if eps <= 0:
        raise DomainError("layer_norm eps must be positive")
    mu = v.mean(axis=-1, keepdims=True)
    var = ((v - mu) ** 2).mean(axis=-1, keepdims=True)
    return (v - mu) / np.sqrt(var + eps) * gain + bias


def _resize_weights(n_in, n_out):
    # align_corners=False: src = (dst + 0.5) * n_in / n_out - 0.5, clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_resize(g, h2, w2):
    """Resize an ``(H, W, C)`` grid with half-pixel-centre bilinear sampling."""
    g = np.asarray(g)
    if g.ndim != 3:
        raise ShapeError(f"expected an (H, W, C) grid, got shape {g.shape}")
    if h2 < 1 or w2 < 1:
        raise ShapeError(f"target size must be positive, got {h2}x{w2}")
    h, w, _ = g.shape
    if (h, w) == (h2, w2):
        return g.copy()
    y0, y1, fy = _resize_weights(h, h2)
    x0, x1, fx = _resize_weights(w, w2)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = g[y0][:, x0] * (1 - fx) + g[y0][:, x1] * fx
    bot = g[y1][:, x0] * (1 - fx) + g[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def gelu(x):
    # tanh approximation
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))
