"""Binary checkpoint container for a ConvNet and optional CRF parameters.

Byte layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"RSALCKPT"
    8       4     uint32 format version (currently 1)
    12      4     uint32 header length n
    16      n     UTF-8 JSON header
    16+n    ...   float32 little-endian payload

The header records ``layers`` (list of ``{"weight": [out, in, kh, kw],
"bias": [out]}``), ``input_scale``, ``padding``, ``crf`` (bandwidths,
iteration count and window, or null) and ``meta`` (free-form, e.g. the
mean pixel and seed). The payload holds, in order, each layer's weight
(C order) then bias, and, when ``crf`` is not null, six values
``omega1, omega2, mu[0,0], mu[0,1], mu[1,0], mu[1,1]``.
Parameters are therefore stored at 32-bit precision.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .backbone import ConvLayer, ConvNet
from .core import DataError
from .crf import CrfParams

MAGIC = b"RSALCKPT"
VERSION = 1
_F32 = np.dtype("<f4")


def to_bytes(net: ConvNet, crf: CrfParams | None = None, meta: dict | None = None) -> bytes:
    header = {
        "layers": [{"weight": list(l.weight.shape), "bias": list(l.bias.shape)} for l in net.layers],
        "input_scale": net.input_scale,
        "padding": net.padding,
        "crf": None if crf is None else {
            "theta_alpha": crf.theta_alpha,
            "theta_beta": crf.theta_beta,
            "theta_gamma": crf.theta_gamma,
            "iters": crf.iters,
            "window": crf.window,
        },
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    for layer in net.layers:
        parts.append(np.ascontiguousarray(layer.weight, dtype=_F32).tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype=_F32).tobytes())
    if crf is not None:
        extra = np.concatenate([[crf.omega1, crf.omega2], crf.mu.ravel()])
        parts.append(extra.astype(_F32).tobytes())
    return b"".join(parts)


def from_bytes(raw: bytes, source: str = "<bytes>") -> tuple[ConvNet, CrfParams | None, dict]:
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise DataError(f"{source}: not a checkpoint (bad magic)")
    version, n = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise DataError(f"{source}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{source}: corrupt header ({exc})") from None
    if len(raw) < 16 + n or (len(raw) - 16 - n) % 4:
        raise DataError(f"{source}: truncated payload")
    payload = np.frombuffer(raw, dtype=_F32, offset=16 + n)
    pos = 0

    def take(shape) -> np.ndarray:
        nonlocal pos
        size = int(np.prod(shape))
        if pos + size > payload.size:
            raise DataError(f"{source}: truncated payload")
        out = payload[pos:pos + size].astype(np.float64).reshape(shape)
        pos += size
        return out

    layers = [ConvLayer(take(spec["weight"]), take(spec["bias"])) for spec in header["layers"]]
    net = ConvNet(layers, float(header["input_scale"]), header["padding"])
    crf = None
    if header.get("crf") is not None:
        c = header["crf"]
        vals = take((6,))
        crf = CrfParams(float(vals[0]), float(vals[1]), c["theta_alpha"], c["theta_beta"], c["theta_gamma"],
                        vals[2:].reshape(2, 2), int(c["iters"]), c["window"])
    if pos != payload.size:
        raise DataError(f"{source}: {payload.size - pos} trailing values in payload")
    return net, crf, header.get("meta", {})


def save(path: str | Path, net: ConvNet, crf: CrfParams | None = None, meta: dict | None = None) -> None:
    Path(path).write_bytes(to_bytes(net, crf, meta))


def load(path: str | Path) -> tuple[ConvNet, CrfParams | None, dict]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such checkpoint: {path}")
    return from_bytes(path.read_bytes(), str(path))


def round_trip(net: ConvNet, crf: CrfParams | None = None) -> tuple[ConvNet, CrfParams | None]:
    """Parameters as they will be after a save/load cycle (float32 rounding)."""
    n, c, _ = from_bytes(to_bytes(net, crf))
    return n, c
