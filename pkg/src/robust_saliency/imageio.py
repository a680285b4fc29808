"""Binary PPM (P6) / PGM (P5) reading and writing, with optional PNG via Pillow."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .core import RGB255, UNIT, DataError, ImageTensor, round_half_away

_WHITESPACE = b" \t\r\n\x0b\x0c"


def _png_enabled() -> bool:
    return os.environ.get("ROBUST_SALIENCY_PNG", "1") != "0"


def _parse_header(raw: bytes) -> tuple[bytes, int, int, int, int]:
    """Return (magic, width, height, maxval, offset of pixel data)."""
    pos = 0
    tokens: list[bytes] = []
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos] in _WHITESPACE:
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos] not in _WHITESPACE and raw[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DataError("truncated PNM header")
        tokens.append(raw[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    if pos >= len(raw) or raw[pos] not in _WHITESPACE:
        raise DataError("malformed PNM header")
    pos += 1
    magic = tokens[0]
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DataError(f"malformed PNM header: {exc}") from None
    return magic, width, height, maxval, pos


def read_pnm(path: str | Path) -> np.ndarray:
    """Decode a P5/P6 file to an integer array of shape (H, W, C)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such image file: {path}")
    raw = path.read_bytes()
    magic, width, height, maxval, offset = _parse_header(raw)
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: unsupported PNM type {magic!r}")
    if width < 1 or height < 1 or not 1 <= maxval <= 65535:
        raise DataError(f"{path}: bad dimensions or maxval")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    need = count * dtype.itemsize
    if len(raw) - offset < need:
        raise DataError(f"{path}: raster truncated")
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    return arr.reshape(height, width, channels).astype(np.int64)


def write_pnm(path: str | Path, samples: np.ndarray, maxval: int = 255) -> None:
    arr = np.asarray(samples)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    if c not in (1, 3):
        raise DataError(f"cannot store {c} channels in PNM")
    if arr.min() < 0 or arr.max() > maxval:
        raise DataError("samples outside [0, maxval]")
    magic = b"P6" if c == 3 else b"P5"
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    header = magic + b"\n%d %d\n%d\n" % (w, h, maxval)
    Path(path).write_bytes(header + arr.astype(dtype).tobytes())


def _to_levels(image: ImageTensor | np.ndarray) -> np.ndarray:
    if isinstance(image, ImageTensor):
        data, space = image.data, image.space
    else:
        data = np.asarray(image, dtype=np.float64)
        space = UNIT
    if space == UNIT:
        data = data * 255.0
    elif space != RGB255:
        raise DataError(f"cannot store a {space} tensor; convert to rgb255 first")
    return np.clip(round_half_away(data), 0, 255).astype(np.uint8)


def read_image(path: str | Path) -> ImageTensor:
    """Read an 8-bit raster into an rgb255 tensor. PNG goes through Pillow."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        if not _png_enabled():
            raise DataError("PNG support is disabled (ROBUST_SALIENCY_PNG=0)")
        if not path.is_file():
            raise DataError(f"no such image file: {path}")
        from PIL import Image

        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64)
        return ImageTensor(arr, RGB255)
    arr = read_pnm(path)
    if arr.max(initial=0) > 255:
        raise DataError(f"{path}: unsupported bit depth (maxval > 255)")
    return ImageTensor(arr, RGB255)


def write_image(image: ImageTensor | np.ndarray, path: str | Path) -> None:
    """Store an rgb255 or unit tensor (2-D arrays are treated as unit maps).

    Samples are rounded half away from zero and clamped to [0, 255].
    """
    path = Path(path)
    levels = _to_levels(image)
    if not path.parent.exists():
        raise DataError(f"output directory does not exist: {path.parent}")
    if path.suffix.lower() == ".png":
        if not _png_enabled():
            raise DataError("PNG support is disabled (ROBUST_SALIENCY_PNG=0)")
        from PIL import Image

        Image.fromarray(levels[:, :, 0] if levels.shape[2] == 1 else levels).save(path)
        return
    try:
        write_pnm(path, levels)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from None


def write_segments(labels: np.ndarray, path: str | Path) -> None:
    """Export a segment label map as a 16-bit PGM."""
    labels = np.asarray(labels)
    if labels.max(initial=0) > 65535:
        raise DataError("too many segments for a 16-bit PGM")
    write_pnm(path, labels, maxval=65535)


def read_segments(path: str | Path) -> np.ndarray:
    return read_pnm(path)[:, :, 0]
