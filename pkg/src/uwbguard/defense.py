"""Test-time adversarial detection and single-pass input clipping.

The detector compares the model's post-concatenation response under stored
batch-norm statistics with the response under the sample's own statistics.
Their difference ``gamma`` gives a distance ``alpha = ||gamma||``; ``alpha``
also serves as the temperature of an auxiliary softmax whose top probability
is the confidence ``beta``. Flagged samples are rescaled elementwise by
``sigmoid(gamma) - sign(gamma)`` and classified once more.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from uwbguard.model import ModelParams, forward, intermediate
from uwbguard.numerics import Mode, sigmoid, softmax

TEMPERATURE_FLOOR = 1e-12


@dataclass(frozen=True)
class DetectorConfig:
    """Thresholds of the two-score rule.

    ``aux_scores`` selects what the auxiliary softmax rescales: ``"probs"``
    (the classifier's softmax output) or ``"logits"``.
    """

    alpha_threshold: float = 0.2
    beta_threshold: float = 0.98
    zeta: float = 0.0
    aux_scores: str = "probs"

    def __post_init__(self):
        if not (np.isfinite(self.alpha_threshold) and np.isfinite(self.beta_threshold)):
            raise ValueError("thresholds must be finite")
        if self.zeta < 0:
            raise ValueError("zeta must be non-negative")
        if self.aux_scores not in ("probs", "logits"):
            raise ValueError(f"aux_scores must be 'probs' or 'logits', got {self.aux_scores!r}")


@dataclass
class DetectionVerdict:
    alpha: np.ndarray
    beta: np.ndarray
    is_clean: np.ndarray
    aux_probs: np.ndarray

    @property
    def flag(self):
        if np.ndim(self.is_clean) == 0:
            return "clean" if self.is_clean else "adversarial"
        return np.where(self.is_clean, "clean", "adversarial")


class ForwardCounter:
    """Counts model passes made on behalf of one call."""

    def __init__(self):
        self.count = 0

    def tick(self):
        self.count += 1


def _check_trained(params: ModelParams) -> None:
    if all(np.all(bn.running_mean == 0) and np.all(bn.running_var == 1) for bn in params.bn_states):
        raise ValueError("batch-norm running statistics are untrained")


def response_gap(inter_running: np.ndarray, inter_self: np.ndarray):
    """``(alpha, gamma)`` from the two intermediate responses."""
    gamma = inter_running - inter_self
    alpha = np.sqrt(np.sum(gamma**2, axis=(-2, -1)))
    return alpha, gamma


def response_distance(x, params: ModelParams):
    """Euclidean distance between RUNNING and SELF intermediate responses.

    Returns ``(alpha, gamma)``; ``gamma`` has the shape of ``x``.
    """
    _check_trained(params)
    return response_gap(intermediate(x, params, Mode.RUNNING), intermediate(x, params, Mode.SELF))


def auxiliary_softmax(scores, alpha, config: DetectorConfig = DetectorConfig()) -> np.ndarray:
    """Softmax of ``scores / (alpha + zeta)``; hard one-hot once the temperature vanishes."""
    scores = np.asarray(scores, dtype=np.float64)
    temp = np.asarray(alpha, dtype=np.float64) + config.zeta
    if np.any(temp < 0):
        raise ValueError("temperature must be non-negative")
    tiny = temp < TEMPERATURE_FLOOR
    safe = np.where(tiny, 1.0, temp)
    out = softmax(scores / np.expand_dims(safe, -1))
    if np.any(tiny):
        hard = np.zeros_like(scores)
        np.put_along_axis(hard, scores.argmax(axis=-1)[..., None], 1.0, axis=-1)
        out = np.where(np.expand_dims(tiny, -1), hard, out)
    return out


def is_clean(alpha, beta, config: DetectorConfig):
    """Strict two-threshold rule; ties go to adversarial."""
    return (np.asarray(alpha) < config.alpha_threshold) & (np.asarray(beta) > config.beta_threshold)


def _verdict(out, alpha, config: DetectorConfig) -> DetectionVerdict:
    scores = out.probs if config.aux_scores == "probs" else out.logits
    aux = auxiliary_softmax(scores, alpha, config)
    beta = aux.max(axis=-1)
    return DetectionVerdict(alpha=alpha, beta=beta, is_clean=is_clean(alpha, beta, config), aux_probs=aux)


def _detect(x, params, config, counter):
    _check_trained(params)
    out = forward(x, params, Mode.RUNNING)
    counter.tick()
    inter_self = intermediate(x, params, Mode.SELF)
    counter.tick()
    alpha, gamma = response_gap(out.intermediate, inter_self)
    return out, gamma, _verdict(out, alpha, config)


def detect(x, params: ModelParams, config: DetectorConfig = DetectorConfig()) -> DetectionVerdict:
    """Verdict for one sample (6, 1024) or per sample of a batch."""
    return _detect(x, params, config, ForwardCounter())[2]


def clip_multiplier(gamma) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=np.float64)
    return sigmoid(gamma) - np.sign(gamma)


def clip_input(x, gamma) -> np.ndarray:
    """Rescale ``x`` by ``sigmoid(gamma) - sign(gamma)`` elementwise."""
    x = np.asarray(x, dtype=np.float64)
    if np.shape(gamma) != x.shape:
        raise ValueError(f"gamma shape {np.shape(gamma)} does not match input {x.shape}")
    return x * clip_multiplier(gamma)


def robust_predict(x, params: ModelParams, config: DetectorConfig = DetectorConfig(), counter=None):
    """Classify with the defense: pass clean-flagged inputs through, clip the rest once.

    Returns ``(prediction, verdict)``. At most three model passes per sample:
    RUNNING forward, SELF response, and one forward of the clipped input.
    """
    counter = counter if counter is not None else ForwardCounter()
    x = np.asarray(x, dtype=np.float64)
    out, gamma, verdict = _detect(x, params, config, counter)
    prediction = np.array(out.prediction, copy=True)
    flagged = ~verdict.is_clean
    if np.ndim(x) == 2:
        if flagged:
            prediction = forward(clip_input(x, gamma), params, Mode.RUNNING).prediction
            counter.tick()
        return int(prediction), verdict
    if np.any(flagged):
        prediction[flagged] = forward(clip_input(x[flagged], gamma[flagged]), params, Mode.RUNNING).prediction
        counter.tick()
    return prediction, verdict


def calibrate_thresholds(
    x_clean, params: ModelParams, target_clean_acceptance: float = 0.95, base: DetectorConfig = DetectorConfig()
) -> DetectorConfig:
    """Set alpha/beta thresholds from quantiles of clean validation scores.

    The thresholds are the raw ``target`` quantile of alpha and ``1 - target``
    quantile of beta; since the rule is strict, a handful of validation samples
    sit exactly on a threshold and count as adversarial.
    """
    x_clean = np.asarray(x_clean, dtype=np.float64)
    if x_clean.ndim != 3 or len(x_clean) == 0:
        raise ValueError("calibration needs a non-empty batch of clean samples")
    if not 0 < target_clean_acceptance <= 1:
        raise ValueError("target_clean_acceptance must lie in (0, 1]")
    v = detect(x_clean, params, base)
    return replace(
        base,
        alpha_threshold=float(np.quantile(v.alpha, target_clean_acceptance)),
        beta_threshold=float(np.quantile(v.beta, 1.0 - target_clean_acceptance)),
    )
