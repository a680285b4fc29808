from __future__ import annotations

import numpy as np
import pytest

from robust_saliency.attack import (AttackConfig, correctly_classified_set, fgsm, generate_adversarial,
                                    iterative_fgsm, loss_gradient, perturbation_step, predicted_labels)
from robust_saliency.backbone import cross_entropy, init_convnet
from robust_saliency.core import ConfigError, DataError, ImageTensor, UNIT

from conftest import central_diff, linear_1x1, random_rgb, rel_err


class FixedScores:
    """Model stub returning the same scores for any input."""

    def __init__(self, scores):
        self.s = np.asarray(scores, dtype=float)

    def scores(self, x):
        return self.s

    def input_gradient(self, x, weights):
        return np.zeros(np.shape(x))


def test_correct_set_constant_model():
    always_one = linear_1x1([0, 0, 0], [0, 0, 0], b=(0.0, 1.0))
    x = random_rgb(4, 4)
    assert correctly_classified_set(always_one, x, np.ones((4, 4), np.uint8)).all()
    assert not correctly_classified_set(always_one, x, np.zeros((4, 4), np.uint8)).any()


def test_ties_resolve_to_background():
    assert predicted_labels(np.zeros((2, 2, 2))).sum() == 0


def test_correct_set_naive_recheck():
    gen = np.random.default_rng(0)
    scores = gen.normal(size=(6, 7, 2))
    y = (gen.random((6, 7)) > 0.5).astype(np.uint8)
    got = correctly_classified_set(FixedScores(scores), np.zeros((6, 7, 3)), y)
    for i in range(6):
        for j in range(7):
            pred = 1 if scores[i, j, 1] > scores[i, j, 0] else 0
            assert got[i, j] == (pred == y[i, j])


def test_step_single_pixel_equals_pixel_gradient(small_net):
    gen = np.random.default_rng(1)
    x = gen.normal(size=(6, 6, 3)) * 40
    y = (gen.random((6, 6)) > 0.5).astype(np.uint8)
    active = np.zeros((6, 6), bool)
    active[2, 3] = True
    w = np.zeros((6, 6, 2))
    w[2, 3] = [1.0, -1.0] if y[2, 3] else [-1.0, 1.0]
    assert np.array_equal(perturbation_step(small_net, x, y, active), small_net.input_gradient(x, w))
    with pytest.raises(ConfigError):
        perturbation_step(small_net, x, y, np.zeros((6, 6), bool))


def test_step_linear_model_analytic():
    w0, w1 = np.array([0.3, -0.2, 1.0]), np.array([-0.5, 0.7, 0.1])
    net = linear_1x1(w0, w1)
    y = np.array([[1, 0], [0, 1]], dtype=np.uint8)
    active = np.array([[True, True], [False, True]])
    p = perturbation_step(net, np.zeros((2, 2, 3)), y, active)
    expected = np.zeros((2, 2, 3))
    expected[0, 0] = w0 - w1  # y=1: push toward class 0
    expected[0, 1] = w1 - w0
    expected[1, 1] = w0 - w1
    assert np.allclose(p, expected, atol=1e-15)


def test_step_finite_differences():
    net = init_convnet(channels=(3, 5, 5, 2), seed=4)
    gen = np.random.default_rng(5)
    x = gen.normal(size=(6, 6, 3)) * 50
    y = (gen.random((6, 6)) > 0.5).astype(np.uint8)
    active = gen.random((6, 6)) > 0.3
    p = perturbation_step(net, x, y, active)

    def obj(z):
        s = net.scores(z)
        wrong = np.where(y > 0, s[..., 0], s[..., 1])
        true = np.where(y > 0, s[..., 1], s[..., 0])
        return float(((wrong - true) * active).sum())

    for flat in gen.choice(x.size, 40, replace=False):
        c = np.unravel_index(flat, x.shape)
        assert rel_err(p[c], central_diff(obj, x, c)) < 1e-4


def test_zero_budget_and_zero_iterations(small_net):
    x = random_rgb(8, 8, seed=2)
    y = (np.random.default_rng(2).random((8, 8)) > 0.5).astype(np.uint8)
    out, trace = generate_adversarial(small_net, x, y, AttackConfig(epsilon=0, mean_pixel=(120, 120, 120)))
    assert np.array_equal(out.data, x.data)
    out, trace = generate_adversarial(small_net, x, y, AttackConfig(epsilon=20, max_iters=0))
    assert np.array_equal(out.data, x.data) and trace.iterations == 0 and trace.linf == []


def test_zero_gradient_is_flagged():
    x = random_rgb(4, 4, seed=3)
    y = np.ones((4, 4), np.uint8)
    out, trace = generate_adversarial(FixedScores(np.tile([0.0, 1.0], (4, 4, 1))), x, y, AttackConfig())
    assert trace.zero_gradient and trace.iterations == 0 and np.array_equal(out.data, x.data)


def test_all_pixels_wrong_stops_immediately_after_first_step():
    # S_0 is every pixel; the loop ends once no pixel is classified correctly
    net = linear_1x1([0, 0, 0], [0.01, 0.01, 0.01], b=(0.0, 0.0))
    x = random_rgb(4, 4, seed=1)
    y = np.zeros((4, 4), np.uint8)  # every pixel is predicted salient (scores tie-break aside)
    out, trace = generate_adversarial(net, x, y, AttackConfig(epsilon=20, max_iters=30))
    assert trace.iterations == 1 and trace.final_correct == 0


def test_hundred_random_attacks_respect_budget():
    gen = np.random.default_rng(6)
    for trial in range(100):
        net = init_convnet(channels=(3, 4, 2), seed=trial)
        x = random_rgb(6, 6, seed=trial)
        y = (gen.random((6, 6)) > 0.5).astype(np.uint8)
        eps = float(gen.choice([0.5, 1.0, 2.5, 3.0, 7.3, 20.0]))
        cfg = AttackConfig(epsilon=eps, alpha=float(gen.uniform(0.3, 4.0)), max_iters=int(gen.integers(1, 12)),
                           mean_pixel=tuple(gen.uniform(0, 255, 3)))
        out, trace = generate_adversarial(net, x, y, cfg)
        assert np.array_equal(out.data, np.round(out.data))
        assert np.max(np.abs(out.data - x.data)) <= eps
        assert out.data.min() >= 0 and out.data.max() <= 255
        assert trace.iterations <= cfg.max_iters


def test_verbatim_mode_may_overshoot_by_one_step():
    net = init_convnet(channels=(3, 4, 2), seed=1)
    x = ImageTensor(np.full((6, 6, 3), 128.0))
    y = np.zeros((6, 6), np.uint8)
    y[2:4, 2:4] = 1
    cfg = AttackConfig(epsilon=2.0, alpha=1.5, max_iters=10, strict_clip=False)
    out, trace = generate_adversarial(net, x, y, cfg)
    assert np.max(np.abs(out.data - x.data)) <= 2.0 + 1.5 + 0.5


def test_attack_deterministic_and_leaves_mask(small_net):
    x = random_rgb(8, 8, seed=4)
    y = (np.random.default_rng(4).random((8, 8)) > 0.5).astype(np.uint8)
    y0 = y.copy()
    a, ta = generate_adversarial(small_net, x, y, AttackConfig(epsilon=6, max_iters=8))
    b, tb = generate_adversarial(small_net, x, y, AttackConfig(epsilon=6, max_iters=8))
    assert np.array_equal(a.data, b.data) and ta == tb and np.array_equal(y, y0)
    assert set(ta.to_dict()) == {"iterations", "final_correct", "linf", "misclassified", "zero_gradient"}


def test_attack_input_validation(small_net):
    with pytest.raises(ConfigError):
        generate_adversarial(small_net, ImageTensor(np.zeros((2, 2, 3)), UNIT), np.zeros((2, 2)), AttackConfig())
    with pytest.raises(DataError):
        generate_adversarial(small_net, random_rgb(2, 2), np.zeros((3, 2)), AttackConfig())
    for kw in ({"epsilon": -1}, {"alpha": 0}, {"max_iters": -1}):
        with pytest.raises(ConfigError):
            AttackConfig(**kw)


def test_default_iteration_cap():
    assert AttackConfig(epsilon=20, alpha=1).iterations == 60
    assert AttackConfig(epsilon=200, alpha=1).iterations == 100
    assert AttackConfig(epsilon=20, max_iters=50).iterations == 50


def _interior_image(seed):
    return ImageTensor(np.random.default_rng(seed).integers(60, 200, size=(6, 6, 3)).astype(float))


def test_fgsm_properties():
    net = init_convnet(channels=(3, 5, 2), seed=8)
    x = _interior_image(8)
    y = (np.random.default_rng(8).random((6, 6)) > 0.5).astype(np.uint8)
    mean = (110.0, 120.0, 130.0)
    assert np.array_equal(fgsm(net, x, y, 0.0, mean).data, x.data)
    out = fgsm(net, x, y, 7.0, mean)
    xm = x.data - np.array(mean)
    g = loss_gradient(net, xm, y)
    f = lambda z: cross_entropy(net.scores(z), y)[0]
    gen = np.random.default_rng(9)
    for flat in gen.choice(xm.size, 30, replace=False):
        c = np.unravel_index(flat, xm.shape)
        num = central_diff(f, xm, c, h=1e-4)
        if abs(num) > 1e-9:
            assert np.sign(out.data[c] - x.data[c]) == np.sign(num) == np.sign(g[c])
    moved = np.abs(out.data - x.data)
    assert np.all(moved[g != 0] == 7.0) and np.all(moved[g == 0] == 0)


def test_iterative_fgsm_single_step_equals_fgsm():
    net = init_convnet(channels=(3, 5, 2), seed=10)
    x = _interior_image(10)
    y = (np.random.default_rng(10).random((6, 6)) > 0.5).astype(np.uint8)
    cfg = AttackConfig(epsilon=5.0, alpha=5.0, max_iters=1, mean_pixel=(100, 100, 100))
    assert np.array_equal(iterative_fgsm(net, x, y, cfg).data, fgsm(net, x, y, 5.0, cfg.mean_pixel).data)


def test_iterative_fgsm_stays_in_ball():
    net = init_convnet(channels=(3, 5, 2), seed=11)
    x = random_rgb(6, 6, seed=11)
    y = (np.random.default_rng(11).random((6, 6)) > 0.5).astype(np.uint8)
    out = iterative_fgsm(net, x, y, AttackConfig(epsilon=3.0, alpha=1.3, max_iters=9, mean_pixel=(128, 128, 128)))
    assert np.max(np.abs(out.data - x.data)) <= 3.0 + 1e-12


def test_iterative_fgsm_linear_hand_trace():
    # score margin m = v . x with v = w1 - w0; for a salient pixel the loss falls as m grows,
    # so every step moves against v, independent of x: after 3 steps of 1.0, clipped at 2.5.
    # The margin is kept small so the softmax does not saturate to an exactly zero gradient.
    w0, w1 = np.array([0.2, -0.1, 0.0]), np.array([-0.3, 0.4, 0.5])
    net = linear_1x1(w0, w1)
    x = ImageTensor(np.full((1, 1, 3), 10.0))
    y = np.ones((1, 1), np.uint8)
    out = iterative_fgsm(net, x, y, AttackConfig(epsilon=2.5, alpha=1.0, max_iters=3))
    v = w1 - w0
    expected = 10.0 - np.sign(v) * np.minimum(3.0, 2.5)
    expected[v == 0] = 10.0
    assert np.allclose(out.data[0, 0], expected)
