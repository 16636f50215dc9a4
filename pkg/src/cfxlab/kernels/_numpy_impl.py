"""Pure-numpy reference implementations of the per-step image kernels.

These mirror the compiled extension tap-for-tap (same summation order,
same zero padding) so the two backends agree to float roundoff.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def _blur_axis(img: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    radius = taps.size // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (radius, radius)
    padded = np.pad(img, pad, mode="constant")
    out = np.zeros_like(img)
    length = img.shape[axis]
    for k in range(taps.size):
        sl = [slice(None), slice(None)]
        sl[axis] = slice(k, k + length)
        out += padded[tuple(sl)] * taps[k]
    return out


def blur2d(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Separable 2-D convolution with zero padding; horizontal then vertical pass."""
    tmp = _blur_axis(np.ascontiguousarray(img, dtype=np.float64), taps, axis=1)
    return _blur_axis(tmp, taps, axis=0)


def abs_diff_chanmean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Channel-mean absolute difference of two (C, H, W) images -> (H, W)."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    out = np.zeros(a.shape[1:], dtype=np.float64)
    for c in range(a.shape[0]):
        out += np.abs(a[c] - b[c])
    return out / a.shape[0]


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Block-average a boolean (H, W) mask and threshold at 0.5 (>= half true)."""
    if factor == 1:
        return mask.astype(bool).copy()
    h, w = mask.shape[0] // factor, mask.shape[1] // factor
    counts = (
        mask.astype(np.int64)
        .reshape(h, factor, w, factor)
        .sum(axis=(1, 3))
    )
    return counts * 2 >= factor * factor


def blend_masked(z: np.ndarray, z0: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-pixel select: z0 where mask is true, z elsewhere; mask broadcast over channels."""
    return np.where(mask[None, :, :], z0, z)
