"""Non-targeted gradient attacks on dense two-class saliency predictors.

All attacks work on mean-subtracted inputs internally and take/return
rgb255 tensors. ``model`` is anything with ``scores(x)`` and
``input_gradient(x, weights)`` (see :class:`backbone.Backbone`).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .backbone import Backbone, cross_entropy
from .core import RGB255, ConfigError, DataError, ImageTensor, as_mask, round_half_away, round_to_rgb


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 20.0
    alpha: float = 1.0
    max_iters: int | None = None  # None -> min(100, ceil(2 eps / alpha) + 20)
    mean_pixel: Sequence[float] = (0.0, 0.0, 0.0)
    strict_clip: bool = True

    def __post_init__(self) -> None:
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if not self.alpha > 0:
            raise ConfigError("alpha must be > 0")
        if self.max_iters is not None and self.max_iters < 0:
            raise ConfigError("max_iters must be >= 0")

    @property
    def iterations(self) -> int:
        if self.max_iters is not None:
            return int(self.max_iters)
        return min(100, math.ceil(2 * self.epsilon / self.alpha) + 20)


@dataclass
class AttackTrace:
    iterations: int = 0
    final_correct: int = 0
    linf: list[float] = field(default_factory=list)
    misclassified: list[float] = field(default_factory=list)
    zero_gradient: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def _check(x: ImageTensor, y: np.ndarray) -> np.ndarray:
    if x.space != RGB255:
        raise ConfigError(f"attacks take rgb255 images, got {x.space}")
    y = as_mask(y)
    if y.shape != x.shape[:2]:
        raise DataError(f"mask {y.shape} does not match image {x.shape[:2]}")
    return y


def _array(x: ImageTensor | np.ndarray) -> np.ndarray:
    return x.data if isinstance(x, ImageTensor) else np.asarray(x, dtype=np.float64)


def predicted_labels(scores: np.ndarray) -> np.ndarray:
    """argmax over the two classes; ties go to class 0 (non-salient)."""
    return (scores[..., 1] > scores[..., 0]).astype(np.uint8)


def correctly_classified_set(model: Backbone, x_t: ImageTensor | np.ndarray, y: np.ndarray) -> np.ndarray:
    """Boolean H x W mask of pixels whose predicted class equals ``y``."""
    return predicted_labels(model.scores(_array(x_t))) == np.asarray(y)


def _flip_weights(y: np.ndarray, active: np.ndarray) -> np.ndarray:
    # +1 on the wrong class, -1 on the true class, only for active pixels
    a = active.astype(np.float64)
    sign = np.where(y > 0, -1.0, 1.0) * a
    return np.stack([-sign, sign], axis=-1)


def perturbation_step(model: Backbone, x_t: ImageTensor | np.ndarray, y: np.ndarray,
                      active: np.ndarray) -> np.ndarray:
    """Sum over active pixels of grad(score of wrong class) - grad(score of true class).

    The result is all zeros when the model has no input sensitivity; callers
    should check ``np.abs(p).max() == 0`` before normalising.
    """
    active = np.asarray(active, dtype=bool)
    if not active.any():
        raise ConfigError("perturbation_step needs at least one active pixel")
    return model.input_gradient(_array(x_t), _flip_weights(np.asarray(y), active))


def _strict_bounds(x: np.ndarray, epsilon: float) -> tuple[np.ndarray, np.ndarray]:
    lo = np.maximum(np.ceil(x - epsilon), 0.0)
    hi = np.minimum(np.floor(x + epsilon), 255.0)
    return lo, hi


def generate_adversarial(model: Backbone, x: ImageTensor, y: np.ndarray,
                         cfg: AttackConfig) -> tuple[ImageTensor, AttackTrace]:
    """Iteratively push every still-correct pixel toward the wrong class.

    Each step adds alpha * p' / ||p'||_inf; the loop stops after
    ``cfg.iterations`` steps, once the L-inf distance exceeds epsilon, or
    when no pixel is classified correctly. With ``strict_clip`` the final
    perturbation is clipped to the epsilon-ball both before and after
    rounding to integers; without it the loop output is rounded as-is and
    may overshoot by up to one step.
    """
    y = _check(x, y)
    mean = np.asarray(cfg.mean_pixel, dtype=np.float64)
    x0 = x.data - mean
    xt = x0.copy()
    trace = AttackTrace()
    active = np.ones(y.shape, dtype=bool)
    e = 0.0
    t = 0
    limit = cfg.iterations
    while t < limit and e <= cfg.epsilon and active.any():
        grad = perturbation_step(model, xt, y, active)
        scale = np.abs(grad).max()
        if scale == 0:
            trace.zero_gradient = True
            break
        xt = xt + cfg.alpha * grad / scale
        e = float(np.abs(xt - x0).max())
        t += 1
        active = correctly_classified_set(model, xt, y)
        trace.linf.append(e)
        trace.misclassified.append(float(1.0 - active.mean()))
    trace.iterations = t
    trace.final_correct = int(active.sum())
    if cfg.strict_clip:
        xt = x0 + np.clip(xt - x0, -cfg.epsilon, cfg.epsilon)
    out = round_to_rgb(xt, mean).data
    if cfg.strict_clip:
        lo, hi = _strict_bounds(x.data, cfg.epsilon)
        out = np.where(lo <= hi, np.clip(out, lo, hi), round_half_away(x.data))
    return ImageTensor(out, RGB255), trace


def loss_gradient(model: Backbone, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of the pixel-mean cross-entropy with respect to the input."""
    _, g_scores = cross_entropy(model.scores(x), y)
    return model.input_gradient(x, g_scores)


def fgsm(model: Backbone, x: ImageTensor, y: np.ndarray, epsilon: float,
         mean_pixel: Sequence[float] = (0.0, 0.0, 0.0)) -> ImageTensor:
    """One signed gradient step of size epsilon on the cross-entropy loss."""
    y = _check(x, y)
    if epsilon < 0:
        raise ConfigError("epsilon must be >= 0")
    grad = loss_gradient(model, x.data - np.asarray(mean_pixel, dtype=np.float64), y)
    return ImageTensor(np.clip(x.data + epsilon * np.sign(grad), 0, 255), RGB255)


def iterative_fgsm(model: Backbone, x: ImageTensor, y: np.ndarray, cfg: AttackConfig) -> ImageTensor:
    """Repeated signed steps of length alpha, each followed by a clip to the epsilon-ball."""
    y = _check(x, y)
    mean = np.asarray(cfg.mean_pixel, dtype=np.float64)
    lo = np.maximum(x.data - cfg.epsilon, 0.0)
    hi = np.minimum(x.data + cfg.epsilon, 255.0)
    xt = x.data.copy()
    for _ in range(cfg.iterations):
        grad = loss_gradient(model, xt - mean, y)
        xt = np.clip(xt + cfg.alpha * np.sign(grad), lo, hi)
    return ImageTensor(xt, RGB255)
