"""Saliency evaluation: MAE, adaptive-threshold precision/recall/F-beta, PR curves."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import DataError, as_mask, as_saliency

BETA_SQ = 0.3


def _pair(s: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = as_saliency(s)
    g = as_mask(g)
    if s.shape != g.shape:
        raise DataError(f"saliency {s.shape} and mask {g.shape} differ in size")
    return s, g


def mae(s: np.ndarray, g: np.ndarray) -> float:
    s, g = _pair(s, g)
    return float(np.abs(s - g).mean())


def adaptive_threshold(s: np.ndarray) -> float:
    """Twice the mean saliency; may exceed 1, in which case nothing is predicted salient."""
    return float(2.0 * np.asarray(s, dtype=np.float64).mean())


def precision_recall(s: np.ndarray, g: np.ndarray, threshold: float) -> tuple[float, float]:
    """Precision and recall of {s > threshold} against the mask.

    Empty-set conventions: nothing predicted and nothing salient gives
    (1, 1); nothing predicted but a non-empty mask gives (0, 0); an empty
    mask with a non-empty prediction gives (0, 1).
    """
    s, g = _pair(s, g)
    pred = s > threshold
    gt = g > 0
    n_pred = int(pred.sum())
    n_gt = int(gt.sum())
    hit = int((pred & gt).sum())
    if n_pred == 0:
        return (1.0, 1.0) if n_gt == 0 else (0.0, 0.0)
    if n_gt == 0:
        return 0.0, 1.0
    return hit / n_pred, hit / n_gt


def f_beta(precision: float, recall: float, beta_sq: float = BETA_SQ, printed_denominator: bool = False) -> float:
    """Weighted harmonic mean with beta^2 = 0.3.

    ``printed_denominator`` swaps beta^2 for beta in the denominator
    (a fidelity-audit variant; not a proper F-measure).
    """
    weight = np.sqrt(beta_sq) if printed_denominator else beta_sq
    den = weight * precision + recall
    if den == 0:
        return 0.0
    return float((1 + beta_sq) * precision * recall / den)


def _counts_above(values: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    ordered = np.sort(values.ravel())
    return len(ordered) - np.searchsorted(ordered, thresholds, side="right")


def pr_curve(predictions: Sequence[np.ndarray], gts: Sequence[np.ndarray],
             n_thresholds: int = 256) -> list[tuple[float, float, float]]:
    """(threshold, mean precision, mean recall) at equally spaced thresholds in [0, 1].

    Same empty-set conventions as :func:`precision_recall`.
    """
    if len(predictions) == 0 or len(predictions) != len(gts):
        raise DataError("pr_curve needs equally long, non-empty prediction and mask lists")
    thresholds = np.linspace(0.0, 1.0, n_thresholds)
    p_sum = np.zeros(n_thresholds)
    r_sum = np.zeros(n_thresholds)
    for s, g in zip(predictions, gts):
        s, g = _pair(s, g)
        n_pred = _counts_above(s, thresholds)
        hit = _counts_above(s[g > 0], thresholds)
        n_gt = int(g.sum())
        with np.errstate(divide="ignore", invalid="ignore"):
            p = np.where(n_pred > 0, hit / np.maximum(n_pred, 1), 1.0 if n_gt == 0 else 0.0)
            r = np.where(n_pred > 0, hit / n_gt if n_gt else 1.0, 1.0 if n_gt == 0 else 0.0)
        p_sum += p
        r_sum += r
    n = len(predictions)
    return [(float(t), float(p / n), float(r / n)) for t, p, r in zip(thresholds, p_sum, r_sum)]


@dataclass
class EvalReport:
    mae: float
    precision: float
    recall: float
    f_beta: float
    pr_curve: list[tuple[float, float, float]] = field(default_factory=list)
    per_image: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_curve_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["threshold", "precision", "recall"])
            for t, p, r in self.pr_curve:
                writer.writerow([repr(t), repr(p), repr(r)])


def evaluate(predictions: Sequence[np.ndarray], gts: Sequence[np.ndarray], names: Sequence[str] | None = None,
             n_thresholds: int = 256, printed_denominator: bool = False, with_curve: bool = True) -> EvalReport:
    """Dataset-level report.

    Precision and recall are taken per image at its adaptive threshold and
    averaged; F-beta is computed from the averaged precision and recall.
    MAE is the mean of per-image MAE.
    """
    if len(predictions) == 0 or len(predictions) != len(gts):
        raise DataError("evaluate needs equally long, non-empty prediction and mask lists")
    names = list(names) if names is not None else [str(i) for i in range(len(predictions))]
    rows = []
    for name, s, g in zip(names, predictions, gts):
        thr = adaptive_threshold(s)
        p, r = precision_recall(s, g, thr)
        rows.append({
            "name": name,
            "mae": mae(s, g),
            "threshold": thr,
            "precision": p,
            "recall": r,
            "f_beta": f_beta(p, r, printed_denominator=printed_denominator),
        })
    p_mean = float(np.mean([r["precision"] for r in rows]))
    r_mean = float(np.mean([r["recall"] for r in rows]))
    curve = pr_curve(predictions, gts, n_thresholds) if with_curve else []
    return EvalReport(
        mae=float(np.mean([r["mae"] for r in rows])),
        precision=p_mean,
        recall=r_mean,
        f_beta=f_beta(p_mean, r_mean, printed_denominator=printed_denominator),
        pr_curve=curve,
        per_image=rows,
    )
