"""SGD training of the backbone alone or end to end with shielding and the CRF."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .backbone import ConvNet, cross_entropy, saliency_from_scores, saliency_grad_to_scores
from .core import ConfigError, DataError, Rng
from .crf import CrfParams, mean_field_backward, mean_field_infer
from .data import Sample
from .filters import BilateralConfig, bilateral_filter
from .metrics import evaluate
from .pipeline import backbone_saliency, rosa_predict
from .shielding import SlicConfig, shuffle_within_segments, slic_segment

log = logging.getLogger(__name__)

PROB_CLIP = 1e-7


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 1e-2
    crf_learning_rate: float | None = None  # None -> learning_rate
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 5
    batch_size: int = 8
    early_stop_patience: int = 2
    clip_grad_norm: float | None = None  # rescale each batch gradient (network and CRF jointly) to this norm

    def __post_init__(self) -> None:
        if self.learning_rate < 0 or (self.crf_learning_rate is not None and self.crf_learning_rate < 0):
            raise ConfigError("learning rates must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.early_stop_patience < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and early_stop_patience >= 1 required")
        if self.clip_grad_norm is not None and not self.clip_grad_norm > 0:
            raise ConfigError("clip_grad_norm must be > 0")


@dataclass
class TrainResult:
    net: ConvNet
    crf: CrfParams | None
    losses: list[float] = field(default_factory=list)
    val_f_beta: list[float] = field(default_factory=list)
    best_epoch: int = -1  # -1: the starting parameters were never beaten
    stopped_early: bool = False
    initial_val_f_beta: float | None = None


class _Momentum:
    """Heavy-ball SGD with L2 weight decay folded into the gradient."""

    def __init__(self, lr: float, momentum: float, decay: float):
        self.lr, self.momentum, self.decay = lr, momentum, decay
        self.velocity: dict[int, np.ndarray] = {}

    def step(self, key: int, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
        g = grad + self.decay * param
        v = self.momentum * self.velocity.get(key, np.zeros_like(param)) + g
        self.velocity[key] = v
        return param - self.lr * v


def _bce_on_probs(q: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    qc = np.clip(q, PROB_CLIP, 1 - PROB_CLIP)
    n = y.size
    loss = -(y * np.log(qc) + (1 - y) * np.log(1 - qc)).sum() / n
    grad = np.where((q > PROB_CLIP) & (q < 1 - PROB_CLIP), (qc - y) / (qc * (1 - qc)), 0.0) / n
    return float(loss), grad


def _validate(net: ConvNet, crf: CrfParams | None, val: Sequence[Sample], mean, slic_cfg,
              bilateral_cfg, rng: Rng) -> float:
    preds = []
    for i, s in enumerate(val):
        if slic_cfg is None and crf is None:
            preds.append(backbone_saliency(net, s.image, mean))
        else:
            preds.append(rosa_predict(s.image, net, crf or CrfParams(omega1=0, omega2=0), slic_cfg or SlicConfig(),
                                      bilateral_cfg, rng.child(i), mean,
                                      shield=slic_cfg is not None, restore=crf is not None))
    return evaluate(preds, [s.mask for s in val], with_curve=False).f_beta


def train(net: ConvNet, crf: CrfParams | None, dataset: Sequence[Sample], sgd: SgdConfig,
          shield_cfg: SlicConfig | None, mean: Sequence[float], seed: int = 0,
          bilateral_cfg: BilateralConfig | None = None, val: Sequence[Sample] | None = None) -> TrainResult:
    """Fine-tune ``net`` (and ``crf`` when given) on natural images.

    With ``shield_cfg`` every training image is superpixel-shuffled (fresh
    shuffle each epoch, no gradient through it); with ``crf`` the loss is
    binary cross-entropy on the CRF output with the bilateral-filtered
    image as guidance, otherwise cross-entropy on the backbone scores.
    Losses are means over pixels and over the batch. When ``val`` is given,
    validation F-beta is tracked, the best epoch's parameters are returned
    and training stops after ``early_stop_patience`` epochs without
    improvement; the starting parameters are scored too and kept if no
    epoch beats them, so fine-tuning never returns a worse model on the
    validation split. Inputs are not modified.
    """
    if not dataset:
        raise DataError("training set is empty")
    bilateral_cfg = bilateral_cfg or BilateralConfig()
    net = net.copy()
    crf = crf.copy() if crf is not None else None
    mean_arr = np.asarray(mean, dtype=np.float64)
    rng = Rng(seed).child(0x7A)
    segs = [slic_segment(s.image, shield_cfg) for s in dataset] if shield_cfg is not None else None
    guides = [bilateral_filter(s.image, bilateral_cfg) for s in dataset] if crf is not None else None
    opt_net = _Momentum(sgd.learning_rate, sgd.momentum, sgd.weight_decay)
    crf_lr = sgd.learning_rate if sgd.crf_learning_rate is None else sgd.crf_learning_rate
    opt_crf = _Momentum(crf_lr, sgd.momentum, 0.0)
    result = TrainResult(net, crf)
    val_rng = Rng(seed).child(0x7B)
    best = -np.inf
    if val:
        best = result.initial_val_f_beta = _validate(net, crf, val, mean_arr, shield_cfg, bilateral_cfg, val_rng)
        log.info("initial val F-beta %.4f", best)
    best_state = (net.copy(), crf.copy() if crf else None)
    stale = 0
    for epoch in range(sgd.epochs):
        order = rng.child(epoch).permutation(len(dataset))
        epoch_loss = 0.0
        for start in range(0, len(order), sgd.batch_size):
            batch = order[start:start + sgd.batch_size]
            g_layers = [np.zeros_like(p) for p in net.parameters()]
            g_w1 = g_w2 = 0.0
            g_mu = np.zeros((2, 2))
            for idx in batch:
                sample = dataset[idx]
                image = sample.image
                if segs is not None:
                    image = shuffle_within_segments(image, segs[idx], rng.child(epoch, int(idx)))
                x = image.data - mean_arr
                scores, cache = net._forward(x)
                if crf is None:
                    loss, g_scores = cross_entropy(scores, sample.mask)
                else:
                    s = saliency_from_scores(scores)
                    q, state = mean_field_infer(s, guides[idx], crf, return_state=True)
                    loss, g_q = _bce_on_probs(q, sample.mask.astype(np.float64))
                    cg = mean_field_backward(state, g_q)
                    g_scores = saliency_grad_to_scores(scores, cg.saliency)
                    g_w1 += cg.omega1
                    g_w2 += cg.omega2
                    g_mu += cg.mu
                if not np.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, sample {sample.name}")
                epoch_loss += loss
                _, grads = net._backward(g_scores, cache)
                for k, (dw, db) in enumerate(grads):
                    g_layers[2 * k] += dw
                    g_layers[2 * k + 1] += db
            scale = 1.0 / len(batch)
            if sgd.clip_grad_norm is not None:
                sq = sum(float((g * g).sum()) for g in g_layers)
                if crf is not None:
                    sq += g_w1 ** 2 + g_w2 ** 2 + float((g_mu * g_mu).sum())
                norm = scale * np.sqrt(sq)
                if norm > sgd.clip_grad_norm:
                    scale *= sgd.clip_grad_norm / norm
            for k, layer in enumerate(net.layers):
                layer.weight = opt_net.step(2 * k, layer.weight, g_layers[2 * k] * scale)
                layer.bias = opt_net.step(2 * k + 1, layer.bias, g_layers[2 * k + 1] * scale)
            if crf is not None:
                crf.omega1 = max(0.0, float(opt_crf.step(0, np.array(crf.omega1), np.array(g_w1 * scale))))
                crf.omega2 = max(0.0, float(opt_crf.step(1, np.array(crf.omega2), np.array(g_w2 * scale))))
                crf.mu = opt_crf.step(2, crf.mu, g_mu * scale)
        result.losses.append(epoch_loss / len(dataset))
        log.info("epoch %d loss %.5f", epoch, result.losses[-1])
        if val:
            f = _validate(net, crf, val, mean_arr, shield_cfg, bilateral_cfg, val_rng)
            result.val_f_beta.append(f)
            log.info("epoch %d val F-beta %.4f", epoch, f)
            if f > best:
                best, stale = f, 0
                best_state = (net.copy(), crf.copy() if crf else None)
                result.best_epoch = epoch
            else:
                stale += 1
                if stale >= sgd.early_stop_patience:
                    result.stopped_early = True
                    break
    if val:
        result.net, result.crf = best_state
    else:
        result.net, result.crf = net, crf
        result.best_epoch = sgd.epochs - 1
    return result
