"""Bilateral guidance filter and the Smooth / Quant input-transformation baselines."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import ConfigError, ImageTensor, round_half_away


@dataclass(frozen=True)
class BilateralConfig:
    sigma_spatial: float = 5.0
    sigma_range: float = 30.0
    radius: int | None = None  # None -> ceil(3 * sigma_spatial)

    def __post_init__(self) -> None:
        if not (self.sigma_spatial > 0 and self.sigma_range > 0):
            raise ConfigError("bilateral sigmas must be positive")
        if self.radius is not None and self.radius < 1:
            raise ConfigError("bilateral radius must be >= 1")

    @property
    def window_radius(self) -> int:
        if self.radius is not None:
            return int(self.radius)
        return max(1, int(np.ceil(3 * self.sigma_spatial)))


def bilateral_filter(image: ImageTensor, cfg: BilateralConfig) -> ImageTensor:
    """Edge-preserving smoothing over a (2r+1)^2 window with reflect-101 borders.

    The range weight uses the Euclidean color distance across channels.
    """
    r = cfg.window_radius
    x = image.data
    h, w, _ = x.shape
    padded = np.pad(x, ((r, r), (r, r), (0, 0)), mode="reflect")
    inv_s = 1.0 / (2.0 * cfg.sigma_spatial ** 2)
    inv_r = 1.0 / (2.0 * cfg.sigma_range ** 2)
    num = np.zeros_like(x)
    den = np.zeros((h, w, 1))
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            nb = padded[r + dy:r + dy + h, r + dx:r + dx + w]
            diff2 = ((nb - x) ** 2).sum(axis=2, keepdims=True)
            wgt = np.exp(-(dy * dy + dx * dx) * inv_s - diff2 * inv_r)
            num += wgt * nb
            den += wgt
    # a convex combination, but rounding can step just outside the input range (e.g. 255 + 3e-14)
    return image.with_data(np.clip(num / den, x.min(), x.max()))


def smooth_baseline(image: ImageTensor, radius: int = 2, mode: str = "reflect") -> ImageTensor:
    """Box-mean filter of side 2*radius+1 applied per channel.

    ``mode`` follows scipy.ndimage; the default mirrors the edge sample
    (row 0, 3, 6 with radius 1 becomes 1, 3, 5).
    """
    if radius < 1:
        raise ConfigError("smooth radius must be >= 1")
    size = (2 * radius + 1, 2 * radius + 1, 1)
    out = ndimage.uniform_filter(image.data, size=size, mode=mode)
    return image.with_data(np.clip(out, image.data.min(), image.data.max()))


def quant_baseline(image: ImageTensor, bits: int = 3) -> ImageTensor:
    """Reduce each 0-255 sample to ``bits`` bits and map back to 0-255."""
    if not 1 <= bits <= 8:
        raise ConfigError("quant bits must be in 1..8")
    levels = 2 ** bits - 1
    q = round_half_away(image.data / 255.0 * levels) * 255.0 / levels
    return image.with_data(np.clip(q, 0, 255))
