"""Test-time adversarial detection and input clipping for UWB CIR keyfob localization."""

from uwbguard.numerics import BatchNormState, Mode
from uwbguard.dataset import CLASS_NAMES, CirDataset, GeneratorConfig, generate, load, save, split
from uwbguard.model import ForwardOutput, ModelParams, TrainConfig, forward, input_gradient, train
from uwbguard.attacks import AttackConfig, AttackKind, bim, epsilon_schedule, fgsm, pgd, run_attack
from uwbguard.defense import (
    DetectionVerdict,
    DetectorConfig,
    auxiliary_softmax,
    calibrate_thresholds,
    clip_input,
    detect,
    robust_predict,
)

__all__ = [
    "AttackConfig",
    "AttackKind",
    "BatchNormState",
    "CLASS_NAMES",
    "CirDataset",
    "DetectionVerdict",
    "DetectorConfig",
    "ForwardOutput",
    "GeneratorConfig",
    "Mode",
    "ModelParams",
    "TrainConfig",
    "auxiliary_softmax",
    "bim",
    "calibrate_thresholds",
    "clip_input",
    "detect",
    "epsilon_schedule",
    "fgsm",
    "forward",
    "generate",
    "input_gradient",
    "load",
    "pgd",
    "robust_predict",
    "run_attack",
    "save",
    "split",
    "train",
]
