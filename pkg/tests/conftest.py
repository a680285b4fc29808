from __future__ import annotations

import numpy as np
import pytest

from robust_saliency.backbone import ConvLayer, ConvNet, init_convnet
from robust_saliency.core import RGB255, ImageTensor


def random_rgb(h: int, w: int, seed: int = 0, integer: bool = True) -> ImageTensor:
    gen = np.random.default_rng(seed)
    data = gen.integers(0, 256, size=(h, w, 3)).astype(float) if integer else gen.uniform(0, 255, (h, w, 3))
    return ImageTensor(data, RGB255)


def linear_1x1(w0, w1, b=(0.0, 0.0)) -> ConvNet:
    """Single 1x1 layer: score_c = w_c . x + b_c."""
    weight = np.array([w0, w1], dtype=float).reshape(2, 3, 1, 1)
    return ConvNet([ConvLayer(weight, np.array(b, dtype=float))], input_scale=1.0)


@pytest.fixture
def small_net() -> ConvNet:
    return init_convnet(channels=(3, 4, 4, 2), seed=3)


@pytest.fixture
def rgb8() -> ImageTensor:
    return random_rgb(8, 8, seed=1)


def rel_err(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps exact zeros from dividing by ~0."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def central_diff(f, x: np.ndarray, index: tuple, h: float = 1e-3) -> float:
    xp = x.copy()
    xm = x.copy()
    xp[index] += h
    xm[index] -= h
    return (f(xp) - f(xm)) / (2 * h)


def central_diff4(f, x: np.ndarray, index: tuple, h: float = 1e-3) -> float:
    """Fourth-order central difference; for inputs on [0, 1] where h = 1e-3 is a coarse step."""
    def at(d):
        z = x.copy()
        z[index] += d
        return f(z)
    return (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h)


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
