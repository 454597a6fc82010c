"""Resampling, Sobel edge magnitude and min-max normalisation."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor

SOBEL_EPS = 1e-12
# largest Sobel magnitude a [0, 1]-valued image can produce
SOBEL_MAX = 4.0 * np.sqrt(2.0)


@dataclass(frozen=True)
class SobelPair:
    gx: np.ndarray
    gy: np.ndarray


def sobel_pair() -> SobelPair:
    gx = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
    return SobelPair(gx=gx, gy=gx.T.copy())


SOBEL = sobel_pair()


def cubic_weight(x: float | np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel; ``a=-0.5`` is Catmull-Rom."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


@lru_cache(maxsize=64)
def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        base = int(np.floor(src))
        for tap in range(base - 1, base + 3):
            m[i, min(max(tap, 0), n_in - 1)] += cubic_weight(src - tap)
    m.flags.writeable = False
    return m


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense 1-D bicubic resampling operator (``n_out x n_in``), edge-clamped."""
    return _resize_matrix(int(n_in), int(n_out))


def bicubic_resize(t: Tensor, out_h: int, out_w: int) -> Tensor:
    """Catmull-Rom resize of the last two axes with half-pixel centres."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"target extents must be positive, got {out_h}x{out_w}")
    h, w = t.shape[-2:]
    if h < 2 or w < 2:
        raise ShapeError(f"bicubic_resize needs source extent >= 2, got {h}x{w}")
    if (h, w) == (out_h, out_w):
        return t
    return ag.separable_linear(t, resize_matrix(h, out_h), resize_matrix(w, out_w))


def sobel_magnitude(t: Tensor) -> Tensor:
    """sqrt(max(gx^2 + gy^2, eps)) per channel, replicate-padded.

    The floor keeps the gradient finite on flat regions without shifting
    any magnitude whose square is above ``SOBEL_EPS``.
    """
    sx = ag.conv2d_fixed(t, SOBEL.gx)
    sy = ag.conv2d_fixed(t, SOBEL.gy)
    return ag.sqrt(ag.clamp(ag.square(sx) + ag.square(sy), SOBEL_EPS, np.inf))


def minmax_normalize(t: Tensor, per_channel: bool = True) -> Tensor:
    """Rescale to [0, 1]; a range below 1e-12 yields zeros."""
    if not np.all(np.isfinite(t.data)):
        raise ValueError("minmax_normalize received non-finite values")
    axes = tuple(range(1, t.ndim)) if per_channel and t.ndim > 1 else None
    hi = ag.amax(t, axes, keepdims=True)
    lo = ag.neg(ag.amax(ag.neg(t), axes, keepdims=True))
    spread = ag.sub(hi, lo)
    flat = spread.data < 1e-12
    # flat channels divide by 1 and are then zeroed
    denom = ag.add(spread, Tensor(flat.astype(np.float64)))
    out = ag.div(ag.sub(t, lo), denom)
    if flat.any():
        out = ag.mul(out, Tensor((~flat).astype(np.float64)))
    return out
