"""Image data model, seeded randomness and small numeric helpers."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

RGB255 = "rgb255"
MEAN_SUBTRACTED = "mean_subtracted"
UNIT = "unit"
VALUE_SPACES = (RGB255, MEAN_SUBTRACTED, UNIT)


class ConfigError(ValueError):
    """Invalid configuration or argument values."""


class DataError(ValueError):
    """Malformed, missing or inconsistent input data."""


@dataclass(frozen=True)
class ImageTensor:
    """An H x W x C raster of float64 samples tagged with its value space.

    Samples live in ``data`` with shape ``(height, width, channels)``.
    The array is made read-only on construction.
    """

    data: np.ndarray
    space: str = RGB255

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise DataError(f"expected H x W x {{1,3}} samples, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DataError("image must be non-empty")
        if self.space not in VALUE_SPACES:
            raise ConfigError(f"unknown value space {self.space!r}")
        if not np.all(np.isfinite(arr)):
            raise DataError("image contains non-finite samples")
        if self.space == RGB255 and (arr.min() < 0 or arr.max() > 255):
            raise DataError("rgb255 samples must lie in [0, 255]")
        if self.space == UNIT and (arr.min() < 0 or arr.max() > 1):
            raise DataError("unit samples must lie in [0, 1]")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray, space: str | None = None) -> "ImageTensor":
        return ImageTensor(data, self.space if space is None else space)


def as_saliency(values: np.ndarray) -> np.ndarray:
    """Validate a saliency map (H x W, values in [0, 1]) and return it as float64."""
    s = np.asarray(values, dtype=np.float64)
    if s.ndim != 2:
        raise DataError(f"saliency map must be 2-D, got shape {s.shape}")
    if s.size and (s.min() < 0 or s.max() > 1 or not np.all(np.isfinite(s))):
        raise DataError("saliency values must lie in [0, 1]")
    return s


def as_mask(values: np.ndarray) -> np.ndarray:
    """Validate a binary mask and return it as uint8."""
    m = np.asarray(values)
    if m.ndim != 2:
        raise DataError(f"mask must be 2-D, got shape {m.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise DataError("mask values must be 0 or 1")
    return m.astype(np.uint8)


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (127.5 -> 128, -0.5 -> -1)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _mean_vector(mean: Sequence[float], channels: int) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float64).reshape(-1)
    if m.size == 1:
        m = np.repeat(m, channels)
    if m.size != channels:
        raise ConfigError(f"mean has {m.size} entries for {channels} channels")
    return m


def to_mean_subtracted(x: ImageTensor, mean: Sequence[float]) -> ImageTensor:
    if x.space != RGB255:
        raise ConfigError(f"to_mean_subtracted expects rgb255 input, got {x.space}")
    return ImageTensor(x.data - _mean_vector(mean, x.channels), MEAN_SUBTRACTED)


def from_mean_subtracted(x: ImageTensor, mean: Sequence[float]) -> ImageTensor:
    """Add the mean back without rounding; the result must already lie in [0, 255]."""
    if x.space != MEAN_SUBTRACTED:
        raise ConfigError(f"from_mean_subtracted expects mean_subtracted input, got {x.space}")
    return ImageTensor(x.data + _mean_vector(mean, x.channels), RGB255)


def round_to_rgb(x: ImageTensor | np.ndarray, mean: Sequence[float]) -> ImageTensor:
    """clamp(round(x + mean), 0, 255) as an integer-valued rgb255 tensor."""
    data = x.data if isinstance(x, ImageTensor) else np.asarray(x, dtype=np.float64)
    if data.ndim == 2:
        data = data[:, :, None]
    out = np.clip(round_half_away(data + _mean_vector(mean, data.shape[2])), 0, 255)
    return ImageTensor(out, RGB255)


def channel_mean(images: Sequence[ImageTensor]) -> list[float]:
    """Per-channel mean over a collection of images (pixel-weighted)."""
    if not images:
        raise DataError("cannot compute a mean over zero images")
    total = np.zeros(images[0].channels)
    count = 0
    for im in images:
        total += im.data.reshape(-1, im.channels).sum(axis=0)
        count += im.height * im.width
    return [float(v) for v in total / count]


@dataclass(frozen=True)
class Rng:
    """A reproducible random stream: Philox-4x64-10 keyed by (seed, *stream).

    Child streams are derived deterministically with :meth:`child`, so parallel
    work never shares generator state.
    """

    seed: int
    stream: tuple[int, ...] = field(default=())

    def __post_init__(self) -> None:
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    def child(self, *keys: int) -> "Rng":
        return Rng(self.seed, self.stream + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.stream)
        return np.random.Generator(np.random.Philox(ss))

    def permutation(self, n: int) -> np.ndarray:
        return self.generator().permutation(n)
