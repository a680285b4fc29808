"""Superpixel decomposition and in-segment pixel shuffling."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ConfigError, DataError, ImageTensor, Rng

# pixels per chunk when evaluating pixel-to-center distances
_CHUNK = 1 << 14


@dataclass(frozen=True)
class SlicConfig:
    """k-means in joint (color, position) space.

    ``compactness`` weighs spatial distance against color distance on the
    0-255 scale; ``tol`` bounds the summed joint-space movement of all
    centers between two iterations.
    """

    k: int = 14
    compactness: float = 10.0
    max_iters: int = 10
    tol: float = 0.01

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigError("slic k must be >= 1")
        if not self.compactness > 0:
            raise ConfigError("slic compactness must be > 0")
        if self.max_iters < 1:
            raise ConfigError("slic max_iters must be >= 1")
        if self.tol < 0:
            raise ConfigError("slic tol must be >= 0")


def default_k(height: int, width: int) -> int:
    """400 segments for a 400 x 300 image, scaled with pixel count."""
    return max(1, int(round(400 * height * width / (400 * 300))))


def _grid_shape(k: int, height: int, width: int) -> tuple[int, int]:
    """Near-square grid of at most k cells (k = 4 on a square gives 2 x 2)."""
    rows = min(height, k, max(1, int(round(math.sqrt(k * height / width)))))
    cols = min(width, max(1, k // rows))
    return rows, cols


def _grid_centers(image: np.ndarray, k: int) -> np.ndarray:
    """Seed centers at the middles of a regular rows x cols grid of cells.

    Returns an array of (color..., row, col) vectors.
    """
    h, w, _ = image.shape
    rows, cols = _grid_shape(k, h, w)
    ys = (np.arange(rows) + 0.5) * h / rows - 0.5
    xs = (np.arange(cols) + 0.5) * w / cols - 0.5
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    cy, cx = cy.ravel(), cx.ravel()
    iy = np.clip(np.floor(cy + 0.5).astype(int), 0, h - 1)
    ix = np.clip(np.floor(cx + 0.5).astype(int), 0, w - 1)
    colors = image[iy, ix]
    return np.column_stack([colors, cy, cx])


def _assign(features: np.ndarray, centers: np.ndarray, scale: np.ndarray) -> np.ndarray:
    fs = features * scale
    cs = centers * scale
    c_sq = np.einsum("kd,kd->k", cs, cs)
    labels = np.empty(len(features), dtype=np.int64)
    for start in range(0, len(features), _CHUNK):
        block = fs[start:start + _CHUNK]
        d2 = np.einsum("nd,nd->n", block, block)[:, None] - 2.0 * block @ cs.T + c_sq[None, :]
        labels[start:start + _CHUNK] = np.argmin(d2, axis=1)
    return labels


def slic_segment(image: ImageTensor, cfg: SlicConfig) -> np.ndarray:
    """Cluster pixels into superpixels; returns an H x W int label map.

    Distance is d^2 = d_color^2 + (compactness / S)^2 d_xy^2 with grid step
    S = sqrt(N / k). Labels are compacted to 0..k'-1 in center order, so
    empty clusters leave no gaps. Deterministic: seeding is on a fixed grid.
    """
    h, w, c = image.shape
    n = h * w
    if cfg.k > n:
        raise ConfigError(f"slic k={cfg.k} exceeds pixel count {n}")
    step = math.sqrt(n / cfg.k)
    yy, xx = np.mgrid[0:h, 0:w]
    features = np.column_stack([image.data.reshape(n, c), yy.ravel(), xx.ravel()]).astype(np.float64)
    scale = np.concatenate([np.ones(c), np.full(2, cfg.compactness / step)])
    centers = _grid_centers(image.data, cfg.k)
    labels = _assign(features, centers, scale)
    for _ in range(cfg.max_iters):
        counts = np.bincount(labels, minlength=len(centers))
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, features)
        filled = counts > 0
        updated = centers.copy()
        updated[filled] = sums[filled] / counts[filled, None]
        moved = np.sqrt((((updated - centers) * scale) ** 2).sum(axis=1)).sum()
        centers = updated
        labels = _assign(features, centers, scale)
        if moved <= cfg.tol:
            break
    _, compact = np.unique(labels, return_inverse=True)
    return compact.reshape(h, w)


def shuffle_within_segments(image: ImageTensor, seg: np.ndarray, rng: Rng) -> ImageTensor:
    """Randomly permute pixel vectors inside every segment.

    Segment ``s`` draws its permutation from ``rng.child(s)``, so each
    segment's shuffle is independent of every other segment.
    """
    seg = np.asarray(seg)
    if seg.shape != image.shape[:2]:
        raise DataError(f"segment map {seg.shape} does not match image {image.shape[:2]}")
    flat = image.data.reshape(-1, image.channels)
    out = flat.copy()
    labels = seg.ravel()
    order = np.argsort(labels, kind="stable")
    bounds = np.flatnonzero(np.diff(labels[order])) + 1
    for idx in np.split(order, bounds):
        if len(idx) < 2:
            continue
        perm = rng.child(int(labels[idx[0]])).permutation(len(idx))
        out[idx] = flat[idx[perm]]
    return image.with_data(out.reshape(image.shape))


def shield(image: ImageTensor, slic_cfg: SlicConfig, rng: Rng) -> tuple[ImageTensor, np.ndarray]:
    seg = slic_segment(image, slic_cfg)
    return shuffle_within_segments(image, seg, rng), seg
