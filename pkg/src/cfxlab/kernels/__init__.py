"""Hot per-step image kernels with a compiled core and a numpy fallback.

The counterfactual search recomputes a smoothed residual map, a pooled
latent mask, and a masked blend at every reverse step, so these run in a
Cython extension when it is built. Set ``CFXLAB_KERNELS=python`` or
``=cython`` to force a backend; the default prefers the extension.
``benchmarks/bench_kernels.py`` compares the two.
"""

from __future__ import annotations

import math
import os

import numpy as np

from ..errors import ConfigurationError, ShapeError
from . import _numpy_impl

try:
    from . import _ckernels
except ImportError:  # pragma: no cover - depends on build environment
    _ckernels = None


def available_backends() -> tuple[str, ...]:
    return ("python", "cython") if _ckernels is not None else ("python",)


def get_backend(name: str):
    if name == "python":
        return _numpy_impl
    if name == "cython":
        if _ckernels is None:
            raise ConfigurationError("cython kernel backend requested but the extension is not built")
        return _ckernels
    raise ConfigurationError(f"unknown kernel backend {name!r}; expected 'python' or 'cython'")


_forced = os.environ.get("CFXLAB_KERNELS")
if _forced:
    _impl = get_backend(_forced)
else:
    _impl = _ckernels if _ckernels is not None else _numpy_impl

BACKEND: str = _impl.BACKEND


def gaussian_taps(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps truncated at radius ceil(3*sigma)."""
    if sigma <= 0:
        raise ConfigurationError(f"gaussian sigma must be > 0, got {sigma}")
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (x / sigma) ** 2)
    return taps / taps.sum()


def blur2d(img: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian-blur a (H, W) map; separable passes, zero padding."""
    if img.ndim != 2:
        raise ShapeError("blur2d expects a 2-D map", expected=("H", "W"), got=img.shape)
    return _impl.blur2d(np.ascontiguousarray(img, dtype=np.float64), gaussian_taps(sigma))


def residual_map(a: np.ndarray, b: np.ndarray, sigma: float) -> np.ndarray:
    """Smoothed spatial residual of two (C, H, W) images: blurred channel-mean |a - b|."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim != 3 or a.shape != b.shape:
        raise ShapeError("residual_map expects matching (C, H, W) images", expected=a.shape, got=b.shape)
    return _impl.blur2d(_impl.abs_diff_chanmean(a, b), gaussian_taps(sigma))


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool a boolean (H, W) mask by `factor` and threshold at 0.5."""
    if mask.ndim != 2:
        raise ShapeError("downsample_mask expects a 2-D mask", expected=("H", "W"), got=mask.shape)
    if factor < 1 or mask.shape[0] % factor or mask.shape[1] % factor:
        raise ShapeError(
            f"mask shape {mask.shape} is not divisible by downsample factor {factor}"
        )
    return _impl.downsample_mask(np.ascontiguousarray(mask, dtype=bool), int(factor))


def blend_masked(z: np.ndarray, z0: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Return z with masked pixels replaced by z0 (exact copies, no arithmetic)."""
    z = np.ascontiguousarray(z, dtype=np.float64)
    z0 = np.ascontiguousarray(z0, dtype=np.float64)
    if z.ndim != 3 or z.shape != z0.shape:
        raise ShapeError("blend_masked expects matching (C, H, W) latents", expected=z.shape, got=z0.shape)
    if mask.shape != z.shape[1:]:
        raise ShapeError("mask resolution must match the latent grid", expected=z.shape[1:], got=mask.shape)
    return _impl.blend_masked(z, z0, np.ascontiguousarray(mask, dtype=bool))
