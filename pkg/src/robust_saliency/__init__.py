"""Adversarial attacks on dense saliency models and a shuffle + dense-CRF defense."""
from __future__ import annotations

from .attack import AttackConfig, AttackTrace, fgsm, generate_adversarial, iterative_fgsm
from .backbone import ConvLayer, ConvNet, forward, init_convnet, input_gradient, param_gradient, saliency
from .core import ConfigError, DataError, ImageTensor, Rng
from .crf import CrfParams, mean_field_backward, mean_field_infer
from .data import Sample, SyntheticSpec, gen_synthetic, load_dataset
from .filters import BilateralConfig, bilateral_filter, quant_baseline, smooth_baseline
from .metrics import EvalReport, evaluate, f_beta, mae, pr_curve, precision_recall
from .pipeline import DefenseConfig, Models, ablation, defended_saliency, epsilon_sweep, rosa_predict
from .shielding import SlicConfig, shield, shuffle_within_segments, slic_segment
from .train import SgdConfig, TrainResult, train

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AttackTrace", "BilateralConfig", "ConfigError", "ConvLayer", "ConvNet", "CrfParams",
    "DataError", "DefenseConfig", "EvalReport", "ImageTensor", "Models", "Rng", "Sample", "SgdConfig",
    "SlicConfig", "SyntheticSpec", "TrainResult", "ablation", "bilateral_filter", "defended_saliency",
    "epsilon_sweep", "evaluate", "f_beta", "fgsm", "forward", "gen_synthetic", "generate_adversarial",
    "init_convnet", "input_gradient", "iterative_fgsm", "load_dataset", "mae", "mean_field_backward",
    "mean_field_infer", "param_gradient", "pr_curve", "precision_recall", "quant_baseline", "rosa_predict",
    "saliency", "shield", "shuffle_within_segments", "slic_segment", "smooth_baseline", "train",
]
