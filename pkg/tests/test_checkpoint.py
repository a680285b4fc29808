from __future__ import annotations

import struct

import numpy as np
import pytest

from robust_saliency.backbone import init_convnet
from robust_saliency.checkpoint import MAGIC, from_bytes, load, round_trip, save, to_bytes
from robust_saliency.core import DataError
from robust_saliency.crf import CrfParams


def test_round_trip_is_float32_exact(tmp_path):
    net = init_convnet(channels=(3, 4, 2), seed=1)
    crf = CrfParams(omega1=1.25, omega2=0.5)
    save(tmp_path / "m.ckpt", net, crf, meta={"seed": 3})
    net2, crf2, meta = load(tmp_path / "m.ckpt")
    assert meta == {"seed": 3}
    for a, b in zip(net.layers, net2.layers):
        assert np.array_equal(a.weight.astype(np.float32), b.weight)
        assert np.array_equal(a.bias.astype(np.float32), b.bias)
    assert net2.input_scale == net.input_scale and net2.padding == net.padding
    assert crf2.omega1 == 1.25 and crf2.omega2 == 0.5 and np.array_equal(crf2.mu, crf.mu)
    assert crf2.theta_alpha == crf.theta_alpha and crf2.iters == crf.iters and crf2.window == crf.window
    # a second cycle is the identity
    assert to_bytes(net2, crf2, meta) == (tmp_path / "m.ckpt").read_bytes()
    n3, c3 = round_trip(net2, crf2)
    assert all(np.array_equal(a.weight, b.weight) for a, b in zip(net2.layers, n3.layers))


def test_layout_header():
    net = init_convnet(channels=(3, 2), seed=0)
    raw = to_bytes(net)
    assert raw[:8] == MAGIC
    version, n = struct.unpack("<II", raw[8:16])
    assert version == 1
    assert len(raw) == 16 + n + 4 * (2 * 3 * 9 + 2)
    _, crf, meta = from_bytes(raw)
    assert crf is None and meta == {}


def test_corrupt_inputs(tmp_path):
    raw = to_bytes(init_convnet(channels=(3, 2), seed=0), CrfParams())
    with pytest.raises(DataError, match="magic"):
        from_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(DataError, match="version"):
        from_bytes(raw[:8] + struct.pack("<I", 9) + raw[12:])
    with pytest.raises(DataError, match="truncated"):
        from_bytes(raw[:-4])
    with pytest.raises(DataError, match="truncated"):
        from_bytes(raw[:-3])
    with pytest.raises(DataError, match="trailing"):
        from_bytes(raw + b"\0" * 4)
    with pytest.raises(DataError):
        load(tmp_path / "nope.ckpt")
