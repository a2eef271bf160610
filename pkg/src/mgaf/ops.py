"""Dense 2D/4D numeric primitives for the imaging, gating and CNN stages.

Conventions: 2D maps are ``(rows, cols)`` arrays; 4D activation blocks are
``(height, width, channels, batch)``. ``flatten4d`` lays each sample out
height-major, then width, then channel, and ``unflatten4d`` inverts it
exactly. "Convolution" here means cross-correlation (no kernel flip); the
distinction is moot for the symmetric kernels the gating stage uses.

All functions are pure. Integer inputs are promoted to float64; float32
inputs are kept as the caller's opt-in to single precision.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "conv2d_same",
    "conv2d_valid",
    "maxpool",
    "sigmoid",
    "flatten4d",
    "unflatten4d",
]


def _as_map(x, name: str = "input") -> np.ndarray:
    a = np.asarray(x)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2D, got shape {a.shape}")
    if a.size == 0:
        raise ValueError(f"{name} has a zero-sized dimension: {a.shape}")
    if not np.issubdtype(a.dtype, np.floating):
        a = a.astype(np.float64)
    return a


def _as_kernel(k, require_odd: bool) -> np.ndarray:
    k = _as_map(k, "kernel")
    if require_odd and (k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0):
        raise ValueError(f"kernel dims must be odd, got {k.shape}")
    return k


def conv2d_same(x, k) -> np.ndarray:
    """Correlate ``x`` with an odd-sized kernel, zero padding so the output
    keeps the input's shape."""
    x = _as_map(x)
    k = _as_kernel(k, require_odd=True)
    rows, cols = x.shape
    kh, kw = k.shape
    ph, pw = kh // 2, kw // 2
    padded = np.zeros((rows + 2 * ph, cols + 2 * pw), dtype=x.dtype)
    padded[ph : ph + rows, pw : pw + cols] = x
    out = np.zeros_like(x)
    for u in range(kh):
        for v in range(kw):
            out += k[u, v] * padded[u : u + rows, v : v + cols]
    return out


def conv2d_valid(x, k, stride: int = 1) -> np.ndarray:
    """Correlate without padding; output dims are ``(in - k)//stride + 1``."""
    x = _as_map(x)
    k = _as_kernel(k, require_odd=False)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    rows, cols = x.shape
    kh, kw = k.shape
    if kh > rows or kw > cols:
        raise ValueError(f"kernel {k.shape} larger than input {x.shape}")
    oh = (rows - kh) // stride + 1
    ow = (cols - kw) // stride + 1
    out = np.zeros((oh, ow), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            out += k[u, v] * x[u : u + (oh - 1) * stride + 1 : stride,
                               v : v + (ow - 1) * stride + 1 : stride]
    return out


def maxpool(x, size: int = 2, stride: int = 2) -> np.ndarray:
    """Max over ``size x size`` windows; trailing rows/cols that do not fill
    a window are dropped."""
    x = _as_map(x)
    if size < 1 or stride < 1:
        raise ValueError("pool size and stride must be >= 1")
    rows, cols = x.shape
    if rows < size or cols < size:
        raise ValueError(f"input {x.shape} smaller than pool window {size}")
    win = np.lib.stride_tricks.sliding_window_view(x, (size, size))
    return win[::stride, ::stride].max(axis=(-2, -1))


def sigmoid(x) -> np.ndarray:
    """Elementwise logistic function, stable for large |x|."""
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def flatten4d(t) -> np.ndarray:
    """Flatten a ``(height, width, channels, batch)`` block to a
    ``(batch, height*width*channels)`` matrix, height-major per sample."""
    t = np.asarray(t)
    if t.ndim != 4:
        raise ValueError(f"expected a 4D block, got shape {t.shape}")
    a, b, n, batch = t.shape
    return np.ascontiguousarray(t.transpose(3, 0, 1, 2)).reshape(batch, a * b * n)


def unflatten4d(m, sample_shape) -> np.ndarray:
    """Inverse of :func:`flatten4d` given the per-sample ``(h, w, c)`` shape."""
    m = _as_map(m, "flattened matrix")
    a, b, n = sample_shape
    if m.shape[1] != a * b * n:
        raise ValueError(f"cannot reshape {m.shape[1]} columns into {sample_shape}")
    return m.reshape(m.shape[0], a, b, n).transpose(1, 2, 3, 0)
