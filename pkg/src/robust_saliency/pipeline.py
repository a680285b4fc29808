"""Defended prediction: shielding -> backbone -> CRF restoration, plus baselines."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .attack import AttackConfig, AttackTrace, generate_adversarial
from .backbone import ConvNet, saliency_from_scores
from .core import ConfigError, ImageTensor, Rng
from .crf import CrfParams, mean_field_infer
from .filters import BilateralConfig, bilateral_filter, quant_baseline, smooth_baseline
from .metrics import evaluate
from .shielding import SlicConfig, shuffle_within_segments, slic_segment

DEFENSES = ("none", "smooth", "quant", "rosa")
ABLATIONS = ("sws", "car", "full")


@dataclass(frozen=True)
class DefenseConfig:
    slic: SlicConfig = field(default_factory=SlicConfig)
    bilateral: BilateralConfig = field(default_factory=BilateralConfig)
    smooth_radius: int = 2
    quant_bits: int = 3
    shield_draws: int = 1  # >1 averages several independent shuffles

    def __post_init__(self) -> None:
        if self.smooth_radius < 0 or not 1 <= self.quant_bits <= 8 or self.shield_draws < 1:
            raise ConfigError("need smooth_radius >= 0, 1 <= quant_bits <= 8 and shield_draws >= 1")


def backbone_saliency(net: ConvNet, image: ImageTensor, mean: Sequence[float]) -> np.ndarray:
    return saliency_from_scores(net.scores(image.data - np.asarray(mean, dtype=np.float64)))


def rosa_predict(image: ImageTensor, net: ConvNet, crf: CrfParams, slic_cfg: SlicConfig,
                 bilateral_cfg: BilateralConfig, rng: Rng, mean: Sequence[float],
                 shield: bool = True, restore: bool = True, draws: int = 1) -> np.ndarray:
    """Saliency of ``image`` through the defended pipeline.

    The image is superpixel-shuffled before the backbone; the CRF guidance is
    the bilateral-filtered raw input, not the shuffled one. With ``draws`` > 1
    the coarse maps of independent shuffles (streams ``rng.child(d)``) are
    averaged before restoration. A CRF with both kernel weights at zero is
    skipped, so its output is exactly the coarse map.
    """
    if draws < 1:
        raise ConfigError("draws must be >= 1")
    if shield:
        seg = slic_segment(image, slic_cfg)
        streams = [rng] if draws == 1 else [rng.child(d) for d in range(draws)]
        maps = [backbone_saliency(net, shuffle_within_segments(image, seg, r), mean) for r in streams]
        coarse = maps[0] if draws == 1 else np.mean(maps, axis=0)
    else:
        coarse = backbone_saliency(net, image, mean)
    if not restore or crf.neutral:
        return coarse
    guidance = bilateral_filter(image, bilateral_cfg)
    return mean_field_infer(coarse, guidance, crf)


def ablation(image: ImageTensor, mode: str, net: ConvNet, crf: CrfParams, cfg: DefenseConfig,
             rng: Rng, mean: Sequence[float]) -> np.ndarray:
    """``sws``: shielding only; ``car``: restoration only; ``full``: both."""
    if mode not in ABLATIONS:
        raise ConfigError(f"unknown ablation mode {mode!r}; expected one of {ABLATIONS}")
    return rosa_predict(image, net, crf, cfg.slic, cfg.bilateral, rng, mean,
                        shield=mode != "car", restore=mode != "sws", draws=cfg.shield_draws)


def defended_saliency(defense: str, image: ImageTensor, cfg: DefenseConfig, mean: Sequence[float],
                      backbone: ConvNet, rosa_net: ConvNet | None = None, crf: CrfParams | None = None,
                      rng: Rng | None = None) -> np.ndarray:
    """Prediction under one of the supported input defenses.

    ``none``/``smooth``/``quant`` run the plain ``backbone``; ``rosa`` runs
    the fine-tuned ``rosa_net`` with its CRF.
    """
    if defense == "none":
        return backbone_saliency(backbone, image, mean)
    if defense == "smooth":
        return backbone_saliency(backbone, smooth_baseline(image, cfg.smooth_radius), mean)
    if defense == "quant":
        return backbone_saliency(backbone, quant_baseline(image, cfg.quant_bits), mean)
    if defense == "rosa":
        if rosa_net is None or crf is None or rng is None:
            raise ConfigError("rosa defense needs a fine-tuned network, CRF parameters and an rng")
        return rosa_predict(image, rosa_net, crf, cfg.slic, cfg.bilateral, rng, mean, draws=cfg.shield_draws)
    raise ConfigError(f"unknown defense {defense!r}; expected one of {DEFENSES}")


# -- experiment orchestration ------------------------------------------------

SHIELD_STREAM = 0x5E


def shield_rng(seed: int, index: int) -> Rng:
    """Shuffle stream for test image ``index``; shared by every defense and epsilon."""
    return Rng(seed).child(SHIELD_STREAM, index)


@dataclass
class Models:
    """Trained weights an experiment needs: the plain backbone and the fine-tuned pair."""

    backbone: ConvNet
    rosa_net: ConvNet | None = None
    crf: CrfParams | None = None


def attack_images(net: ConvNet, samples: Sequence, cfg: AttackConfig) -> list[tuple[ImageTensor, AttackTrace]]:
    """White-box Algorithm-style attack of every sample against ``net``."""
    return [generate_adversarial(net, s.image, s.mask, cfg) for s in samples]


def predict_all(defense: str, images: Sequence[ImageTensor], models: Models, cfg: DefenseConfig,
                mean: Sequence[float], seed: int) -> list[np.ndarray]:
    return [defended_saliency(defense, img, cfg, mean, models.backbone, models.rosa_net, models.crf,
                              shield_rng(seed, i)) for i, img in enumerate(images)]


def ablate_all(mode: str, images: Sequence[ImageTensor], models: Models, cfg: DefenseConfig,
               mean: Sequence[float], seed: int) -> list[np.ndarray]:
    if models.rosa_net is None or models.crf is None:
        raise ConfigError("ablation needs the fine-tuned network and CRF parameters")
    return [ablation(img, mode, models.rosa_net, models.crf, cfg, shield_rng(seed, i), mean)
            for i, img in enumerate(images)]


def epsilon_sweep(samples: Sequence, eps_list: Sequence[float], models: Models, cfg: DefenseConfig,
                  attack: AttackConfig, defenses: Sequence[str] = DEFENSES, seed: int = 0) -> list[dict]:
    """One row per (epsilon, defense): F-beta, MAE, precision and recall.

    For every epsilon the adversarial set is regenerated against the plain
    backbone (``attack`` supplies alpha, iterations, mean and clipping) and
    every defense is evaluated on it.
    """
    for d in defenses:
        if d not in DEFENSES:
            raise ConfigError(f"unknown defense {d!r}; expected one of {DEFENSES}")
    gts = [s.mask for s in samples]
    rows = []
    for eps in eps_list:
        step = replace(attack, epsilon=float(eps))
        adversarial = [img for img, _ in attack_images(models.backbone, samples, step)]
        for d in defenses:
            report = evaluate(predict_all(d, adversarial, models, cfg, attack.mean_pixel, seed), gts,
                              with_curve=False)
            rows.append({"epsilon": float(eps), "defense": d, "f_beta": report.f_beta, "mae": report.mae,
                         "precision": report.precision, "recall": report.recall})
    return rows


def write_rows_csv(rows: Sequence[dict], path, columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])
