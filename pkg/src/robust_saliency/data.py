"""Synthetic saliency datasets and JSON dataset manifests.

A manifest is a JSON object::

    {
      "version": 1,
      "mean_pixel": [r, g, b],          # channel mean of the train split
      "items": [
        {"image_path": "images/0000.ppm", "mask_path": "masks/0000.pgm", "split": "train"},
        ...
      ]
    }

Paths are relative to the manifest's directory (absolute paths also work).
Masks are 8-bit grayscale; values >= 128 count as salient.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import RGB255, DataError, ImageTensor, Rng, channel_mean
from .imageio import read_image, write_image

MANIFEST_VERSION = 1
SHAPES = ("disk", "rect", "blob")


@dataclass(frozen=True)
class SyntheticSpec:
    """Striped foreground shapes on a smooth background.

    Foreground and background colours are drawn from the same ranges by
    default, so the stripe texture (amplitude ``texture``, a random
    orientation and a period of ``1 / stripe_freq`` pixels per object) is
    what marks an object. ``noise`` sets both the per-pixel Gaussian noise
    and a low-frequency background undulation; with ``noise = 0`` the
    background is exactly constant.
    """

    splits: dict = field(default_factory=lambda: {"train": 200, "val": 40, "test": 40})
    size: int = 64
    shapes: tuple = SHAPES
    max_shapes: int = 2
    noise: float = 3.0
    texture: float = 20.0
    stripe_freq: tuple = (0.15, 0.3)
    background_range: tuple = (60.0, 180.0)
    foreground_range: tuple = (60.0, 180.0)
    seed: int = 0

    @property
    def n_images(self) -> int:
        return int(sum(self.splits.values()))


@dataclass
class Sample:
    name: str
    image: ImageTensor
    mask: np.ndarray


def _draw_shape(kind: str, gen: np.random.Generator, h: int, w: int) -> dict:
    lo, hi = 0.12 * min(h, w), 0.28 * min(h, w)
    cy = float(gen.uniform(0.25 * h, 0.75 * h))
    cx = float(gen.uniform(0.25 * w, 0.75 * w))
    if kind == "disk":
        return {"kind": "disk", "circles": [[cy, cx, float(gen.uniform(lo, hi))]]}
    if kind == "rect":
        hh, hw = gen.uniform(lo, hi, size=2)
        return {"kind": "rect", "cy": cy, "cx": cx, "half_h": float(hh), "half_w": float(hw)}
    if kind == "blob":
        circles = []
        for _ in range(3):
            r = float(gen.uniform(0.6 * lo, 0.8 * hi))
            oy, ox = gen.uniform(-0.6 * lo, 0.6 * lo, size=2)
            circles.append([cy + float(oy), cx + float(ox), r])
        return {"kind": "blob", "circles": circles}
    raise DataError(f"unknown shape {kind!r}")


def rasterize(shape: dict, h: int, w: int) -> np.ndarray:
    """Pixel-centre rasterisation of a shape descriptor."""
    yy, xx = np.mgrid[0:h, 0:w]
    if shape["kind"] == "rect":
        return (np.abs(yy - shape["cy"]) <= shape["half_h"]) & (np.abs(xx - shape["cx"]) <= shape["half_w"])
    out = np.zeros((h, w), dtype=bool)
    for cy, cx, r in shape["circles"]:
        out |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    return out


def _smooth_field(gen: np.random.Generator, h: int, w: int) -> np.ndarray:
    # sum of a few low-frequency sinusoids, roughly unit amplitude
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    field_ = np.zeros((h, w))
    for _ in range(3):
        fy, fx = gen.uniform(0.5, 2.0, size=2)
        phase = gen.uniform(0, 2 * np.pi)
        field_ += np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    return field_ / 3.0


def _stripes(gen: np.random.Generator, h: int, w: int, freq: tuple) -> np.ndarray:
    theta = gen.uniform(0, np.pi)
    f = gen.uniform(*freq)
    phase = gen.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    return np.sin(2 * np.pi * f * (np.cos(theta) * yy + np.sin(theta) * xx) + phase)


def render_sample(spec: SyntheticSpec, index: int) -> tuple[np.ndarray, np.ndarray, list[dict]]:
    """Return (H x W x 3 uint8 image, H x W uint8 mask, shape descriptors) for one index."""
    gen = Rng(spec.seed).child(index).generator()
    h = w = spec.size
    background = gen.uniform(*spec.background_range, size=3)
    img = np.broadcast_to(background, (h, w, 3)).copy()
    if spec.noise > 0:
        for c in range(3):
            img[:, :, c] += 2.0 * spec.noise * _smooth_field(gen, h, w)
        img += gen.normal(0.0, spec.noise, size=(h, w, 3))
    mask = np.zeros((h, w), dtype=bool)
    objects = []
    for _ in range(int(gen.integers(1, spec.max_shapes + 1))):
        kind = spec.shapes[int(gen.integers(len(spec.shapes)))]
        shape = _draw_shape(kind, gen, h, w)
        region = rasterize(shape, h, w)
        objects.append(shape)
        color = gen.uniform(*spec.foreground_range, size=3)
        fg = np.broadcast_to(color, (h, w, 3)).copy()
        if spec.texture > 0:
            fg += spec.texture * _stripes(gen, h, w, spec.stripe_freq)[:, :, None]
        if spec.noise > 0:
            fg += gen.normal(0.0, spec.noise, size=(h, w, 3))
        img[region] = fg[region]
        mask |= region
    img = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
    return img, mask.astype(np.uint8), objects


def gen_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> Path:
    """Write images, masks and manifest.json into ``out_dir``; returns the manifest path."""
    if spec.n_images < 1:
        raise DataError("synthetic dataset needs at least one image")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from None
    items = []
    train_images = []
    index = 0
    for split, count in spec.splits.items():
        for _ in range(int(count)):
            img, mask, objects = render_sample(spec, index)
            name = f"{index:04d}"
            tensor = ImageTensor(img, RGB255)
            write_image(tensor, out / "images" / f"{name}.ppm")
            write_image(ImageTensor(mask * 255.0, RGB255), out / "masks" / f"{name}.pgm")
            items.append({
                "image_path": f"images/{name}.ppm",
                "mask_path": f"masks/{name}.pgm",
                "split": split,
                "objects": objects,
            })
            if split == "train":
                train_images.append(tensor)
            index += 1
    mean = channel_mean(train_images) if train_images else [128.0, 128.0, 128.0]
    manifest = {
        "version": MANIFEST_VERSION,
        "mean_pixel": mean,
        "synthetic": {**asdict(spec), "shapes": list(spec.shapes), "stripe_freq": list(spec.stripe_freq),
                      "background_range": list(spec.background_range),
                      "foreground_range": list(spec.foreground_range)},
        "items": items,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such manifest: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(manifest, dict) or not isinstance(manifest.get("items"), list):
        raise DataError(f"{path}: manifest must be an object with an 'items' list")
    for item in manifest["items"]:
        if not isinstance(item, dict) or "image_path" not in item or "mask_path" not in item:
            raise DataError(f"{path}: every item needs image_path and mask_path")
    return manifest


def read_mask(path: str | Path) -> np.ndarray:
    """Load a mask file and binarise it at 128."""
    raw = read_image(path).data
    gray = raw.mean(axis=2) if raw.shape[2] == 3 else raw[:, :, 0]
    return (gray >= 128).astype(np.uint8)


def load_dataset(manifest_path: str | Path, split: str | None = None) -> list[Sample]:
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    root = manifest_path.parent
    items = [it for it in manifest["items"] if split is None or it.get("split") == split]
    if not items:
        raise DataError(f"{manifest_path}: no items" + (f" in split {split!r}" if split else ""))
    samples = []
    for item in items:
        img_path = root / item["image_path"]
        mask_path = root / item["mask_path"]
        image = read_image(img_path)
        mask = read_mask(mask_path)
        if mask.shape != image.shape[:2]:
            raise DataError(f"{mask_path}: mask {mask.shape} does not match image {img_path} {image.shape[:2]}")
        samples.append(Sample(Path(item["image_path"]).stem, image, mask))
    return samples


def manifest_mean(manifest_path: str | Path) -> list[float]:
    manifest = read_manifest(manifest_path)
    mean = manifest.get("mean_pixel")
    if mean is None:
        return channel_mean([s.image for s in load_dataset(manifest_path, "train")])
    return [float(v) for v in mean]
