"""Evaluation harness: train, sweep attacks over budget levels, score detector and pipeline.

Level numbering is 1-based; level 1 is the clean test set (epsilon 0). For
detection, level 1 counts samples flagged clean and higher levels count
samples flagged adversarial.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from uwbguard import dataset as ds
from uwbguard.attacks import AttackConfig, AttackKind, epsilon_schedule, run_attack
from uwbguard.defense import DetectorConfig, ForwardCounter, calibrate_thresholds, robust_predict
from uwbguard.model import ModelParams, TrainConfig, forward, save_params, train

log = logging.getLogger(__name__)

DEFAULT_TRAIN = TrainConfig(
    epochs=200,
    learning_rate=1e-3,
    optimizer="adam",
    bn_gamma_init=0.01,
    train_bn_affine=False,
)


class ConfigError(ValueError):
    pass


def _build(cls, raw, where):
    if raw is None:
        return None
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(unknown)}")
    return raw


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one evaluation run depends on.

    ``seed`` is the root seed; it overrides the seeds of the data and training
    sections so that one number pins every random stream.
    """

    data: ds.GeneratorConfig = ds.GeneratorConfig()
    data_path: str | None = None
    train: TrainConfig = DEFAULT_TRAIN
    attacks: tuple[str, ...] = ("fgsm", "bim", "pgd")
    epsilon_max: float = 1.0
    n_levels: int = 15
    attack_steps: int = 10
    attack_step_size: float | None = None
    calibrate: bool = True
    calibration_target: float = 1.0
    validation_fraction: float = 0.5
    detector: DetectorConfig = DetectorConfig()
    source_threshold: float = 0.98
    seed: int = 0

    def __post_init__(self):
        if self.n_levels < 2:
            raise ConfigError("n_levels must be at least 2")
        if not self.attacks:
            raise ConfigError("at least one attack kind is required")
        for a in self.attacks:
            try:
                AttackKind(a)
            except ValueError:
                raise ConfigError(f"unknown attack {a!r}; choose from fgsm, bim, pgd") from None
        if not 0 < self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in (0, 1)")
        if self.epsilon_max < 0:
            raise ConfigError("epsilon_max must be non-negative")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @property
    def generator(self) -> ds.GeneratorConfig:
        return replace(self.data, seed=self.seed)

    @property
    def trainer(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)

    @property
    def levels(self) -> np.ndarray:
        return epsilon_schedule(self.epsilon_max, self.n_levels)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        _build(cls, raw, "config")
        kw = dict(raw)
        try:
            if "data" in kw:
                d = _build(ds.GeneratorConfig, kw["data"], "data")
                if "delay_profile" in d:
                    d = {**d, "delay_profile": tuple(tuple(r) for r in d["delay_profile"])}
                kw["data"] = ds.GeneratorConfig(**d)
            if "train" in kw:
                kw["train"] = replace(DEFAULT_TRAIN, **_build(TrainConfig, kw["train"], "train"))
            if "detector" in kw:
                kw["detector"] = DetectorConfig(**_build(DetectorConfig, kw["detector"], "detector"))
            if "attacks" in kw:
                kw["attacks"] = tuple(kw["attacks"])
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["attacks"] = list(self.attacks)
        out["data"]["delay_profile"] = [list(r) for r in self.data.delay_profile]
        return out


@dataclass
class Context:
    """A trained model with its data splits and detector thresholds."""

    config: ExperimentConfig
    data: ds.CirDataset
    params: ModelParams
    detector: DetectorConfig
    x_val: np.ndarray
    timings: dict = field(default_factory=dict)

    @property
    def test(self):
        return self.data.test


def load_or_generate(config: ExperimentConfig) -> ds.CirDataset:
    data = ds.load(config.data_path) if config.data_path else ds.generate(config.generator)
    return ds.split(data, config.seed)


def holdout(x, y, fraction: float):
    """Split the training set into ``(fit, validation)``; validation is the leading slice."""
    n_val = math.ceil(fraction * len(x))
    if n_val >= len(x):
        raise ValueError("validation holdout leaves no training samples")
    return (x[n_val:], y[n_val:]), x[:n_val]


def fit(config: ExperimentConfig, data: ds.CirDataset):
    """Train on the non-held-out part of the training split; returns ``(params, x_val)``."""
    x, y = data.train
    fit_set, x_val = holdout(x, y, config.validation_fraction)
    return train(fit_set, config.trainer), x_val


def detector_for(config: ExperimentConfig, params: ModelParams, x_val) -> DetectorConfig:
    if not config.calibrate:
        return config.detector
    return calibrate_thresholds(x_val, params, config.calibration_target, config.detector)


def prepare(config: ExperimentConfig, data: ds.CirDataset | None = None) -> Context:
    t0 = time.perf_counter()
    data = data if data is not None else load_or_generate(config)
    params, x_val = fit(config, data)
    t1 = time.perf_counter()
    detector = detector_for(config, params, x_val)
    return Context(config, data, params, detector, x_val, timings={"train_s": t1 - t0})


def source_baseline_detect(x, params: ModelParams, confidence_threshold: float = 0.98):
    """Undefended baseline: clean iff the top softmax probability exceeds the threshold."""
    return forward(x, params).probs.max(axis=-1) > confidence_threshold


def detection_accuracy(flagged_clean, level: int) -> float:
    """Fraction flagged clean at level 1, fraction flagged adversarial above."""
    flagged_clean = np.asarray(flagged_clean, dtype=bool)
    if flagged_clean.size == 0:
        raise ValueError(f"no test samples at level {level}")
    hits = flagged_clean if level == 1 else ~flagged_clean
    return int(hits.sum()) / flagged_clean.size


@dataclass
class LevelResult:
    attack: str
    level: int
    epsilon: float
    n: int
    flagged_clean: int
    detection_defended: float
    detection_source: float
    robust_source: float
    robust_defended: float
    alpha: np.ndarray = field(repr=False)
    beta: np.ndarray = field(repr=False)
    max_passes: int = 0


def attack_config(config: ExperimentConfig, kind: str, epsilon: float) -> AttackConfig:
    return AttackConfig(
        kind=AttackKind(kind),
        epsilon=float(epsilon),
        steps=config.attack_steps,
        step_size=config.attack_step_size,
        seed=config.seed,
    )


def attacked_set(ctx: Context, kind: str, epsilon: float) -> np.ndarray:
    x, y = ctx.test
    return run_attack(x, y, ctx.params, attack_config(ctx.config, kind, epsilon))


DetectFn = Callable[[np.ndarray, int], np.ndarray]


def evaluate_level(ctx: Context, kind: str, level: int, x_adv=None, detect_fn: DetectFn | None = None) -> LevelResult:
    """All metrics for one (attack, level) cell."""
    eps = float(ctx.config.levels[level - 1])
    _, y = ctx.test
    if x_adv is None:
        x_adv = attacked_set(ctx, kind, eps)
    if len(x_adv) == 0:
        raise ValueError(f"no test samples at level {level}")
    counter = ForwardCounter()
    pred, verdict = robust_predict(x_adv, ctx.params, ctx.detector, counter)
    clean = verdict.is_clean if detect_fn is None else np.asarray(detect_fn(x_adv, level), dtype=bool)
    source_out = forward(x_adv, ctx.params)
    source_clean = source_out.probs.max(axis=-1) > ctx.config.source_threshold
    return LevelResult(
        attack=kind,
        level=level,
        epsilon=eps,
        n=len(x_adv),
        flagged_clean=int(clean.sum()),
        detection_defended=detection_accuracy(clean, level),
        detection_source=detection_accuracy(source_clean, level),
        robust_source=float(np.mean(source_out.prediction == y)),
        robust_defended=float(np.mean(pred == y)),
        alpha=np.asarray(verdict.alpha),
        beta=np.asarray(verdict.beta),
        max_passes=counter.count,
    )


def sweep(ctx: Context, attacks=None, detect_fn: DetectFn | None = None) -> list[LevelResult]:
    """Evaluate every (attack, level) pair in canonical order."""
    t0 = time.perf_counter()
    rows = []
    for kind in attacks or ctx.config.attacks:
        for level in range(1, ctx.config.n_levels + 1):
            rows.append(evaluate_level(ctx, kind, level, detect_fn=detect_fn))
            log.info("%s L%d done", kind, level)
    ctx.timings["sweep_s"] = time.perf_counter() - t0
    return rows


def run_detection_experiment(ctx: Context, detect_fn: DetectFn | None = None) -> list[dict]:
    return detection_rows(sweep(ctx, detect_fn=detect_fn))


def run_robustness_experiment(ctx: Context) -> list[dict]:
    return robustness_rows(sweep(ctx))


def run_curves(ctx: Context) -> dict[str, list[dict]]:
    rows = sweep(ctx)
    return {"alpha": curve_rows(rows, "alpha"), "beta": curve_rows(rows, "beta")}


def detection_rows(rows: list[LevelResult]) -> list[dict]:
    return [
        {
            "attack": r.attack,
            "level": r.level,
            "epsilon": r.epsilon,
            "n": r.n,
            "flagged_clean": r.flagged_clean,
            "flagged_adversarial": r.n - r.flagged_clean,
            "detection_defended": r.detection_defended,
            "detection_source": r.detection_source,
        }
        for r in rows
    ]


def robustness_rows(rows: list[LevelResult]) -> list[dict]:
    return [
        {
            "attack": r.attack,
            "level": r.level,
            "epsilon": r.epsilon,
            "n": r.n,
            "robust_source": r.robust_source,
            "robust_defended": r.robust_defended,
        }
        for r in rows
    ]


def curve_rows(rows: list[LevelResult], score: str) -> list[dict]:
    out = []
    for r in rows:
        v = getattr(r, score)
        out.append(
            {
                "attack": r.attack,
                "level": r.level,
                "epsilon": r.epsilon,
                "mean": float(np.mean(v)),
                "median": float(np.median(v)),
                "p5": float(np.quantile(v, 0.05)),
                "p95": float(np.quantile(v, 0.95)),
            }
        )
    return out


def summarize(ctx: Context, rows: list[LevelResult], weight_bytes: int) -> dict:
    per_attack = {}
    for kind in dict.fromkeys(r.attack for r in rows):
        sel = [r for r in rows if r.attack == kind]
        src = float(np.mean([r.robust_source for r in sel]))
        dfd = float(np.mean([r.robust_defended for r in sel]))
        adv = [r for r in sel if r.level > 1]
        per_attack[kind] = {
            "mean_robust_source": src,
            "mean_robust_defended": dfd,
            "improvement": dfd - src,
            "mean_detection_defended": float(np.mean([r.detection_defended for r in adv])) if adv else None,
            "mean_detection_source": float(np.mean([r.detection_source for r in adv])) if adv else None,
        }
    x, y = ctx.test
    return {
        "seed": ctx.config.seed,
        "n_train": int(ctx.data.is_train.sum()),
        "n_validation": len(ctx.x_val),
        "n_test": len(y),
        "clean_accuracy_source": float(np.mean(forward(x, ctx.params).prediction == y)),
        "detector": asdict(ctx.detector),
        "epsilons": [float(e) for e in ctx.config.levels],
        "attacks": per_attack,
        "weight_bytes": weight_bytes,
        "timings_file": "timings.json",
        "config": ctx.config.to_dict(),
    }


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(rows[0].keys())
    for r in rows:
        w.writerow(_fmt(v) for v in r.values())
    return buf.getvalue()


def atomic_write(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_report(ctx: Context, rows: list[LevelResult], out_dir, weight_bytes: int) -> dict:
    """Write the two tables, the two curve files, the summary and the timings."""
    out_dir = Path(out_dir)
    summary = summarize(ctx, rows, weight_bytes)
    files = {
        "table1_detection.csv": to_csv(detection_rows(rows)),
        "table2_robustness.csv": to_csv(robustness_rows(rows)),
        "fig3_alpha.csv": to_csv(curve_rows(rows, "alpha")),
        "fig4_beta.csv": to_csv(curve_rows(rows, "beta")),
        "summary.json": json.dumps(summary, indent=2, sort_keys=True) + "\n",
    }
    for name, text in files.items():
        atomic_write(out_dir / name, text)
    timings = {k: round(v, 3) for k, v in ctx.timings.items()}
    atomic_write(out_dir / "timings.json", json.dumps(timings, indent=2, sort_keys=True) + "\n")
    return summary


def weight_size(params: ModelParams, out_dir) -> int:
    """Save the weights under ``out_dir`` and return the file size."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return save_params(params, out_dir / "model.uwbm")


def run_all(config: ExperimentConfig, out_dir) -> dict:
    t0 = time.perf_counter()
    ctx = prepare(config)
    size = weight_size(ctx.params, out_dir)
    rows = sweep(ctx)
    ctx.timings["total_s"] = time.perf_counter() - t0
    return write_report(ctx, rows, out_dir, size)
