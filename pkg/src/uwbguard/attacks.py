"""White-box L-infinity evasion attacks (FGSM, BIM, PGD) against the source model."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from uwbguard.model import ModelParams, input_gradient
from uwbguard.seeding import substream


class AttackKind(str, enum.Enum):
    FGSM = "fgsm"
    BIM = "bim"
    PGD = "pgd"


@dataclass(frozen=True)
class AttackConfig:
    """``step_size=None`` means epsilon / 4."""

    kind: AttackKind = AttackKind.FGSM
    epsilon: float = 0.0
    steps: int = 10
    step_size: float | None = None
    random_start: bool = True
    clamp_range: tuple[float, float] = (0.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.clamp_range[0] > self.clamp_range[1]:
            raise ValueError("clamp_range must be ordered")

    @property
    def effective_step(self) -> float:
        return self.epsilon / 4.0 if self.step_size is None else self.step_size


def epsilon_schedule(epsilon_max: float, n_levels: int = 15) -> np.ndarray:
    """Equally spaced budgets from 0 (clean) to ``epsilon_max``."""
    if n_levels < 2:
        raise ValueError("n_levels must be at least 2")
    if epsilon_max < 0:
        raise ValueError("epsilon_max must be non-negative")
    return epsilon_max * np.arange(n_levels) / (n_levels - 1)


def fgsm(x, label, params: ModelParams, config: AttackConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if config.epsilon == 0:
        return x.copy()
    lo, hi = config.clamp_range
    step = config.epsilon * np.sign(input_gradient(x, label, params))
    return np.clip(x + step, lo, hi)


def _iterate(x, x0, label, params, config: AttackConfig) -> np.ndarray:
    lo, hi = config.clamp_range
    eps, a = config.epsilon, config.effective_step
    low, high = x0 - eps, x0 + eps
    for _ in range(config.steps):
        x = np.clip(x + a * np.sign(input_gradient(x, label, params)), lo, hi)
        x = np.clip(x, low, high)
    return x


def bim(x, label, params: ModelParams, config: AttackConfig) -> np.ndarray:
    x0 = np.asarray(x, dtype=np.float64)
    if config.epsilon == 0:
        return x0.copy()
    return _iterate(x0, x0, label, params, config)


def pgd(x, label, params: ModelParams, config: AttackConfig) -> np.ndarray:
    """BIM from a seeded uniform start inside the ball (when ``random_start``)."""
    x0 = np.asarray(x, dtype=np.float64)
    if config.epsilon == 0:
        return x0.copy()
    start = x0
    if config.random_start:
        rng = substream(config.seed, "pgd")
        lo, hi = config.clamp_range
        start = np.clip(x0 + rng.uniform(-config.epsilon, config.epsilon, x0.shape), lo, hi)
    return _iterate(start, x0, label, params, config)


_ATTACKS = {AttackKind.FGSM: fgsm, AttackKind.BIM: bim, AttackKind.PGD: pgd}


def run_attack(x, label, params: ModelParams, config: AttackConfig) -> np.ndarray:
    return _ATTACKS[AttackKind(config.kind)](x, label, params, config)
