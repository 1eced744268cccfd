"""Command-line entry point.

Every subcommand reads an optional JSON config, honors ``--seed`` and writes
under ``--out``. Exit codes: 0 success, 1 other failure, 2 missing config
file, 3 no trained model for ``evaluate``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from uwbguard import dataset as ds
from uwbguard import experiments as ex
from uwbguard.defense import DetectorConfig
from uwbguard.model import forward, load_params

DATASET_FILE = "dataset.cir"
MODEL_FILE = "model.uwbm"
DETECTOR_FILE = "detector.json"

log = logging.getLogger("uwbguard")


class CliError(Exception):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", type=Path, default=Path("results"), help="output directory")
    common.add_argument("--no-calibrate", action="store_true", help="use the fixed default thresholds")
    common.add_argument("--attacks", help="comma-separated subset of fgsm,bim,pgd")
    common.add_argument("--levels", type=int, help="number of budget levels including the clean one")
    common.add_argument("--eps-max", type=float, help="largest attack budget")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="uwbguard", description="UWB keyless-entry classifier with a test-time defense")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate-data", parents=[common], help="write the synthetic dataset")
    sub.add_parser("train", parents=[common], help="train the classifier and calibrate the detector")
    sub.add_parser("attack", parents=[common], help="write attacked copies of the test split")
    sub.add_parser("evaluate", parents=[common], help="score detector and pipeline on every level")
    sub.add_parser("report", parents=[common], help="print a summary of an evaluated run")
    sub.add_parser("run-all", parents=[common], help="generate, train and evaluate in one go")
    return p


def resolve_config(args) -> ex.ExperimentConfig:
    if args.config is not None:
        if not args.config.is_file():
            raise CliError(f"config file not found: {args.config}", 2)
        config = ex.ExperimentConfig.from_file(args.config)
    else:
        config = ex.ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.no_calibrate:
        overrides["calibrate"] = False
    if args.attacks:
        overrides["attacks"] = tuple(a.strip().lower() for a in args.attacks.split(",") if a.strip())
    if args.levels is not None:
        overrides["n_levels"] = args.levels
    if args.eps_max is not None:
        overrides["epsilon_max"] = args.eps_max
    return replace(config, **overrides) if overrides else config


def _dataset(config, out: Path) -> ds.CirDataset:
    """Dataset from ``--out`` when a previous stage wrote one, else from the config."""
    if config.data_path is None and (out / DATASET_FILE).is_file():
        return ds.split(ds.load(out / DATASET_FILE), config.seed)
    return ex.load_or_generate(config)


def _save_detector(detector: DetectorConfig, out: Path) -> None:
    ex.atomic_write(out / DETECTOR_FILE, json.dumps(asdict(detector), indent=2, sort_keys=True) + "\n")


def _load_context(config, out: Path) -> ex.Context:
    model_path = out / MODEL_FILE
    if not model_path.is_file():
        raise CliError(f"no trained model at {model_path}; run `uwbguard train` first", 3)
    params, _ = load_params(model_path)
    data = _dataset(config, out)
    x, y = data.train
    _, x_val = ex.holdout(x, y, config.validation_fraction)
    det_path = out / DETECTOR_FILE
    if det_path.is_file():
        detector = DetectorConfig(**json.loads(det_path.read_text()))
    else:
        detector = ex.detector_for(config, params, x_val)
    if not config.calibrate:
        detector = config.detector
    return ex.Context(config, data, params, detector, x_val)


def cmd_generate_data(config, out: Path) -> None:
    data = ex.load_or_generate(config)
    out.mkdir(parents=True, exist_ok=True)
    ds.save(data, out / DATASET_FILE)
    print(f"wrote {len(data)} samples to {out / DATASET_FILE}")


def cmd_train(config, out: Path) -> None:
    t0 = time.perf_counter()
    ctx = ex.prepare(config, _dataset(config, out))
    size = ex.weight_size(ctx.params, out)
    _save_detector(ctx.detector, out)
    x, y = ctx.test
    acc = float(np.mean(forward(x, ctx.params).prediction == y))
    print(f"trained in {time.perf_counter() - t0:.1f}s; test accuracy {acc:.4f}; weights {size} bytes")
    print(f"thresholds alpha < {ctx.detector.alpha_threshold:.6g}, beta > {ctx.detector.beta_threshold:.6g}")


def cmd_attack(config, out: Path) -> None:
    ctx = _load_context(config, out)
    x, y = ctx.test
    for kind in config.attacks:
        sets = {f"L{i + 1:02d}": ex.attacked_set(ctx, kind, eps) for i, eps in enumerate(config.levels)}
        path = out / "attacks" / f"{kind}.npz"
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.stem + ".tmp.npz")
        np.savez(tmp, labels=y, epsilons=config.levels, **sets)
        tmp.replace(path)
        print(f"wrote {len(sets)} levels of {kind} to {path}")


def cmd_evaluate(config, out: Path) -> dict:
    t0 = time.perf_counter()
    ctx = _load_context(config, out)
    size = (out / MODEL_FILE).stat().st_size
    rows = ex.sweep(ctx)
    ctx.timings["total_s"] = time.perf_counter() - t0
    summary = ex.write_report(ctx, rows, out, size)
    print_report(out)
    return summary


def cmd_run_all(config, out: Path) -> dict:
    summary = ex.run_all(config, out)
    print_report(out)
    return summary


def print_report(out: Path) -> None:
    path = out / "summary.json"
    if not path.is_file():
        raise CliError(f"no summary at {path}; run `uwbguard evaluate` first", 3)
    summary = json.loads(path.read_text())
    det = summary["detector"]
    print(f"seed {summary['seed']}: clean accuracy {summary['clean_accuracy_source']:.4f}, n_test {summary['n_test']}")
    print(f"thresholds alpha < {det['alpha_threshold']:.6g}, beta > {det['beta_threshold']:.6g}")
    print(f"{'attack':<6} {'src acc':>8} {'def acc':>8} {'delta':>8} {'src det':>8} {'def det':>8}")
    for kind, s in summary["attacks"].items():
        sd = s["mean_detection_source"]
        dd = s["mean_detection_defended"]
        print(
            f"{kind:<6} {s['mean_robust_source']:8.4f} {s['mean_robust_defended']:8.4f} {s['improvement']:+8.4f}"
            f" {sd if sd is None else format(sd, '8.4f'):>8} {dd if dd is None else format(dd, '8.4f'):>8}"
        )
    table = out / "table1_detection.csv"
    if table.is_file():
        with open(table) as fh:
            worst = min(csv.DictReader(fh), key=lambda r: float(r["detection_defended"]))
        print(f"lowest defended detection: {worst['attack']} L{worst['level']} {float(worst['detection_defended']):.4f}")
    print(f"weights {summary['weight_bytes']} bytes")


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "report": lambda config, out: print_report(out),
    "run-all": cmd_run_all,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = resolve_config(args)
        COMMANDS[args.command](config, args.out)
    except CliError as exc:
        print(f"uwbguard: {exc}", file=sys.stderr)
        return exc.code
    except (ValueError, OSError) as exc:
        print(f"uwbguard: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
