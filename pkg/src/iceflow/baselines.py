"""Persistence and high-pass comparison models."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

# residuals smaller than this are rounding noise, not texture
_RESIDUAL_FLOOR = 1e-12


@dataclass(frozen=True)
class HighPassConfig:
    blur_sigma: float = 2.0
    binarize: bool = True
    threshold: float = 0.0

    def __post_init__(self):
        if not self.blur_sigma > 0:
            raise ValueError("blur_sigma must be positive")


def persistence_predict(history):
    """The last observed chip, untouched."""
    if len(history) == 0:
        raise ValueError("persistence needs a non-empty history")
    return history[-1]


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(chip, sigma: float) -> np.ndarray:
    k = gaussian_kernel(sigma)
    out = ndimage.correlate1d(np.asarray(chip, dtype=np.float64), k, axis=0, mode="nearest")
    return ndimage.correlate1d(out, k, axis=1, mode="nearest")


def highpass(chip, cfg: HighPassConfig = HighPassConfig()) -> np.ndarray:
    """Unsharp residual ``chip - blur(chip)``, optionally thresholded to {0, 1}.

    Nodata (NaN) pixels are replaced with the chip mean before blurring.
    """
    a = np.array(chip, dtype=np.float64)
    bad = ~np.isfinite(a)
    if bad.all():
        raise ValueError("chip has no valid pixels")
    if bad.any():
        a[bad] = a[~bad].mean()
    residual = a - gaussian_blur(a, cfg.blur_sigma)
    residual[np.abs(residual) < _RESIDUAL_FLOOR] = 0.0
    if not cfg.binarize:
        return residual
    return (residual > cfg.threshold).astype(np.float64)


def highpass_predict(history, cfg: HighPassConfig = HighPassConfig()) -> np.ndarray:
    """Filtered last frame; score it against ``highpass(target, cfg)``."""
    return highpass(persistence_predict(history), cfg)
