from __future__ import annotations

import math

import numpy as np
import pytest

from robust_saliency.core import ConfigError, DataError, ImageTensor
from robust_saliency.crf import (CrfParams, SeparableGaussian, kernel_matrices, mean_field_backward, mean_field_infer,
                                 pairwise_kernel, potts)

from conftest import random_rgb, rel_err


def naive_mean_field(s: np.ndarray, guide: np.ndarray, p: CrfParams) -> np.ndarray:
    """Double loop over pixel pairs, straight from the update rule."""
    h, w = s.shape
    pix = [(y, x) for y in range(h) for x in range(w)]
    u = [[-math.log(max(1.0 - s[y, x], 1e-8)), -math.log(max(s[y, x], 1e-8))] for y, x in pix]
    q = []
    for ui in u:
        e = [math.exp(-v) for v in ui]
        q.append([v / sum(e) for v in e])
    for _ in range(p.iters):
        new = []
        for i, (yi, xi) in enumerate(pix):
            m = [0.0, 0.0]
            for j, (yj, xj) in enumerate(pix):
                if i == j:
                    continue
                d2 = (yi - yj) ** 2 + (xi - xj) ** 2
                c2 = sum((guide[yi, xi, c] - guide[yj, xj, c]) ** 2 for c in range(guide.shape[2]))
                k = p.omega1 * math.exp(-d2 / (2 * p.theta_alpha ** 2) - c2 / (2 * p.theta_beta ** 2)) \
                    + p.omega2 * math.exp(-d2 / (2 * p.theta_gamma ** 2))
                m[0] += k * q[j][0]
                m[1] += k * q[j][1]
            z = [-u[i][l] - (p.mu[l, 0] * m[0] + p.mu[l, 1] * m[1]) for l in range(2)]
            top = max(z)
            e = [math.exp(v - top) for v in z]
            new.append([v / sum(e) for v in e])
        q = new
    return np.array([qi[1] for qi in q]).reshape(h, w)


def random_instance(seed: int, max_side: int = 5):
    gen = np.random.default_rng(seed)
    h, w = (int(v) for v in gen.integers(1, max_side + 1, size=2))
    s = gen.random((h, w))
    guide = ImageTensor(gen.integers(0, 256, size=(h, w, 3)).astype(float))
    params = CrfParams(omega1=float(gen.uniform(0, 3)), omega2=float(gen.uniform(0, 3)),
                       theta_alpha=float(gen.uniform(1, 200)), theta_beta=float(gen.uniform(2, 80)),
                       theta_gamma=float(gen.uniform(0.5, 5)), mu=gen.normal(size=(2, 2)),
                       iters=int(gen.integers(1, 4)))
    return s, guide, params


def test_pairwise_example():
    g = ImageTensor(np.full((2, 2, 3), 50.0))
    k = pairwise_kernel((0, 0), (0, 1), g, CrfParams())
    assert k == pytest.approx(math.exp(-1 / 51200) + math.exp(-1 / 18), abs=1e-15)
    assert k == pytest.approx(1.94594, abs=1e-5)
    assert pairwise_kernel((0, 0), (1, 1), g, CrfParams(omega1=0, omega2=0)) == 0


def test_pairwise_symmetry_and_colour_limit():
    g = random_rgb(4, 4, seed=3)
    p = CrfParams(omega1=0.7, omega2=1.3)
    for i, j in [((0, 0), (3, 2)), ((1, 2), (2, 1)), ((3, 3), (0, 1))]:
        assert pairwise_kernel(i, j, g, p) == pairwise_kernel(j, i, g, p)
    far = np.zeros((1, 2, 3))
    far[0, 1] = 255
    k = pairwise_kernel((0, 0), (0, 1), ImageTensor(far), p)
    assert k == pytest.approx(1.3 * math.exp(-1 / 18), rel=1e-12)


def test_params_validation():
    with pytest.raises(ConfigError):
        CrfParams(theta_beta=0)
    with pytest.raises(ConfigError):
        CrfParams(iters=0)
    with pytest.raises(ConfigError):
        CrfParams(window=0)
    assert np.array_equal(potts(), [[0, 1], [1, 0]])
    assert CrfParams(omega1=0, omega2=0).neutral and not CrfParams().neutral


def test_neutral_weights_return_unary():
    s = np.random.default_rng(0).random((6, 5))
    out = mean_field_infer(s, random_rgb(6, 5), CrfParams(omega1=0, omega2=0, iters=3))
    assert np.max(np.abs(out - s)) <= 1e-15


def test_uniform_unary_stays_uniform():
    out = mean_field_infer(np.full((5, 5), 0.5), ImageTensor(np.full((5, 5, 3), 90.0)), CrfParams())
    assert np.max(np.abs(out - 0.5)) < 1e-15


@pytest.mark.parametrize("seed", range(60))
def test_matches_naive_oracle(seed):
    s, guide, params = random_instance(seed)
    got = mean_field_infer(s, guide, params)
    assert np.max(np.abs(got - naive_mean_field(s, guide.data, params))) < 1e-9


def test_three_by_three_one_iteration():
    s = np.array([[0.9, 0.2, 0.6], [0.4, 0.5, 0.1], [0.7, 0.3, 0.8]])
    guide = ImageTensor(np.arange(27, dtype=float).reshape(3, 3, 3) * 9)
    p = CrfParams(omega1=1.5, omega2=0.5, theta_alpha=2.0, theta_beta=30.0, theta_gamma=1.0,
                  mu=[[0.0, 1.2], [0.8, 0.0]], iters=1)
    assert np.max(np.abs(mean_field_infer(s, guide, p) - naive_mean_field(s, guide.data, p))) < 1e-9


def test_dense_kernels_match_pairwise_kernel():
    g = random_rgb(4, 5, seed=7)
    p = CrfParams(omega1=1.0, omega2=0.0, theta_alpha=3.0, theta_beta=40.0)
    k_app, k_smooth = kernel_matrices(g, p)
    dense_smooth = k_smooth.toarray()
    for a in range(20):
        for b in range(20):
            if a == b:
                assert k_app[a, b] == 0 and dense_smooth[a, b] == 0
                continue
            i, j = divmod(a, 5), divmod(b, 5)
            assert k_app[a, b] == pytest.approx(pairwise_kernel(i, j, g, p), rel=1e-12)
            smooth = math.exp(-((i[0] - j[0]) ** 2 + (i[1] - j[1]) ** 2) / (2 * 3.0 ** 2))
            assert dense_smooth[a, b] == pytest.approx(smooth, rel=1e-12)
    assert np.array_equal(k_app, k_app.T)
    q = np.random.default_rng(1).random((20, 2))
    assert np.allclose(SeparableGaussian(4, 5, 3.0) @ q, dense_smooth @ q, atol=1e-12)


def test_window_covering_image_equals_dense():
    s, guide, params = random_instance(5, max_side=5)
    params.window = 10
    windowed = mean_field_infer(s, guide, params)
    params.window = None
    assert np.max(np.abs(windowed - mean_field_infer(s, guide, params))) < 1e-12


def test_outputs_normalised_each_iteration():
    s = np.random.default_rng(2).random((6, 6))
    _, state = mean_field_infer(s, random_rgb(6, 6, seed=2), CrfParams(iters=4), return_state=True)
    for q in state.q:
        assert np.max(np.abs(q.sum(axis=1) - 1)) < 1e-9 and q.min() >= 0 and q.max() <= 1


def _disagreements(labels: np.ndarray) -> int:
    return int((labels[1:] != labels[:-1]).sum() + (labels[:, 1:] != labels[:, :-1]).sum())


def test_smoothing_reduces_label_disagreement():
    """Salt-and-pepper unary on constant guidance, Potts compatibility, one iteration."""
    s = np.full((8, 8), 0.7)
    s[::3, ::3] = 0.35  # isolated pepper pixels
    s[1, 6] = s[6, 1] = 0.3
    guide = ImageTensor(np.full((8, 8, 3), 120.0))
    before = _disagreements(s > 0.5)
    after = _disagreements(mean_field_infer(s, guide, CrfParams(iters=1)) > 0.5)
    assert after < before


def test_unary_validation():
    g = random_rgb(2, 2)
    with pytest.raises(DataError):
        mean_field_infer(np.full((2, 2), 1.5), g, CrfParams())
    with pytest.raises(DataError):
        mean_field_infer(np.full((2, 2, 2), 0.7), g, CrfParams())
    with pytest.raises(DataError):
        mean_field_infer(np.full((3, 2), 0.5), g, CrfParams())


# -- gradients


def _fd_saliency(s, guide, params, up, y, x, h=1e-6):
    sp, sm = s.copy(), s.copy()
    sp[y, x] += h
    sm[y, x] -= h
    f = lambda z: float((mean_field_infer(z, guide, params) * up).sum())
    return (f(sp) - f(sm)) / (2 * h)


def _fd_param(s, guide, params, up, set_value, h=1e-6):
    def f(delta):
        p = params.copy()
        set_value(p, delta)
        return float((mean_field_infer(s, guide, p) * up).sum())
    return (f(h) - f(-h)) / (2 * h)


def test_unary_gradient_without_messages():
    gen = np.random.default_rng(3)
    s = gen.uniform(0.05, 0.95, (4, 4))
    guide = random_rgb(4, 4, seed=3)
    p = CrfParams(omega1=0, omega2=0, iters=2)
    up = gen.normal(size=(4, 4))
    _, state = mean_field_infer(s, guide, p, return_state=True)
    g = mean_field_backward(state, up).saliency
    for y in range(4):
        for x in range(4):
            assert rel_err(g[y, x], _fd_saliency(s, guide, p, up, y, x)) < 1e-4
    assert np.allclose(g, up, atol=1e-9)  # identity map when messages vanish


def test_unrolled_gradients_finite_differences():
    checked = 0
    for seed in range(4):
        gen = np.random.default_rng(100 + seed)
        s = gen.uniform(0.05, 0.95, (6, 5))
        guide = random_rgb(6, 5, seed=seed)
        p = CrfParams(omega1=float(gen.uniform(0.2, 1.5)), omega2=float(gen.uniform(0.2, 1.5)),
                      theta_alpha=20.0, theta_beta=float(gen.uniform(20, 60)), theta_gamma=1.5,
                      mu=potts() + gen.normal(scale=0.2, size=(2, 2)), iters=int(gen.integers(1, 4)))
        up = gen.normal(size=(6, 5))
        _, state = mean_field_infer(s, guide, p, return_state=True)
        grads = mean_field_backward(state, up)
        for y, x in zip(gen.integers(0, 6, 25), gen.integers(0, 5, 25)):
            assert rel_err(grads.saliency[y, x], _fd_saliency(s, guide, p, up, y, x)) < 1e-4
            checked += 1

        def set_w1(q, d):
            q.omega1 += d

        def set_w2(q, d):
            q.omega2 += d

        assert rel_err(grads.omega1, _fd_param(s, guide, p, up, set_w1)) < 1e-4
        assert rel_err(grads.omega2, _fd_param(s, guide, p, up, set_w2)) < 1e-4
        for a in range(2):
            for b in range(2):
                def set_mu(q, d, a=a, b=b):
                    q.mu[a, b] += d
                assert rel_err(grads.mu[a, b], _fd_param(s, guide, p, up, set_mu)) < 1e-4
    assert checked >= 100


def test_backward_zero_upstream_and_errors():
    s = np.random.default_rng(4).random((3, 3))
    _, state = mean_field_infer(s, random_rgb(3, 3), CrfParams(iters=2), return_state=True)
    g = mean_field_backward(state, np.zeros((3, 3)))
    assert np.all(g.unary == 0) and g.omega1 == 0 and g.omega2 == 0 and np.all(g.mu == 0)
    with pytest.raises(DataError):
        mean_field_backward(state, np.zeros((2, 3)))
    state.q.pop()
    with pytest.raises(DataError):
        mean_field_backward(state, np.zeros((3, 3)))
