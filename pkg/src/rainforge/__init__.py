"""Differentiable rain-streak synthesis and adversarial rain attacks on small
numpy-based vision models."""

__version__ = "0.1.0"

from .attack import AttackConfig, AttackReport, attack_classifier, attack_detector, normal_rain_baseline
from .augment import AugmentConfig, AugmentedPair, augment_dataset, augment_pair, sample_weights
from .errors import (
    ConfigError, ContractError, EmptySupportError, FormatError, InvalidArgumentError, RainforgeError,
    UndefinedMetricError,
)
from .metrics import EvalSummary, average_precision, psnr, ssim, success_rate
from .rain import (
    Bounds, NoiseField, RainFactors, RainLayer, composite, generate_rain_layer, project_factors,
    random_factors, sample_noise,
)
from .tensor import Tape, Tensor, backward
from .victim import ToyClassifier, ToyDetector, classify_loss, detect_losses, train_victim

__all__ = [
    "AttackConfig", "AttackReport", "AugmentConfig", "AugmentedPair", "Bounds", "ConfigError",
    "ContractError", "EmptySupportError", "EvalSummary", "FormatError", "InvalidArgumentError",
    "NoiseField", "RainFactors", "RainLayer", "RainforgeError", "Tape", "Tensor", "ToyClassifier",
    "ToyDetector", "UndefinedMetricError", "attack_classifier", "attack_detector", "augment_dataset",
    "augment_pair", "average_precision", "backward", "classify_loss", "composite", "detect_losses",
    "generate_rain_layer", "normal_rain_baseline", "project_factors", "psnr", "random_factors",
    "sample_noise", "sample_weights", "ssim", "success_rate", "train_victim",
]
