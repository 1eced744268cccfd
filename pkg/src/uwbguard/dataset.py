"""Synthetic six-sensor UWB CIR dataset, its train/test split, and file container.

The generator places a keyfob in one of six zones around a car and renders, for
each of six anchors, a sparse channel impulse response: a line-of-sight tap at
the zone's delay for that anchor, exponentially decaying multipath echoes after
it, and white noise. Each sample is then max-normalized to [0, 1].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from uwbguard.seeding import substream

CLASS_NAMES = ("back", "back seat", "driver seat", "front", "left", "right")
N_SENSORS = 6
S_LEN = 1024
FORMAT_VERSION = 1

# Anchor and zone coordinates in metres; x points to the car front, y to its left.
_SENSOR_XY = np.array(
    [
        [2.3, 0.0],  # front bumper
        [-2.3, 0.0],  # rear bumper
        [0.4, 1.0],  # left mirror
        [0.4, -1.0],  # right mirror
        [0.6, 0.0],  # dashboard
        [-0.9, 0.0],  # rear shelf
    ]
)
_ZONE_XY = np.array(
    [
        [-3.6, 0.0],  # back
        [-0.6, 0.3],  # back seat
        [0.3, 0.4],  # driver seat
        [3.6, 0.0],  # front
        [0.0, 2.3],  # left
        [0.0, -2.3],  # right
    ]
)
# Fixed per-anchor receive latency, in taps, so anchors occupy different patches.
_SENSOR_OFFSET = np.array([40, 300, 560, 140, 410, 680])
_TAPS_PER_METRE = 45.0


def _default_delay_profile() -> tuple[tuple[int, ...], ...]:
    dist = np.linalg.norm(_ZONE_XY[:, None, :] - _SENSOR_XY[None, :, :], axis=-1)
    taps = np.rint(_SENSOR_OFFSET[None, :] + _TAPS_PER_METRE * dist).astype(int)
    return tuple(tuple(int(t) for t in row) for row in taps)


DEFAULT_DELAY_PROFILE = _default_delay_profile()


@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs of the synthetic channel model.

    ``delay_profile[c][n]`` is the line-of-sight tap index of anchor ``n`` for
    class ``c``. ``delay_jitter`` is the per-sample standard deviation (taps) of
    that position, modelling where in the zone the keyfob sits.
    """

    n_samples: int = 461
    delay_profile: tuple[tuple[int, ...], ...] = DEFAULT_DELAY_PROFILE
    decay_constant: float = 30.0
    tap_density: float = 6.0
    noise_sigma: float = 0.01
    delay_jitter: float = 2.0
    amplitude_ref: float = 150.0
    seed: int = 0

    def validate(self) -> None:
        profile = np.asarray(self.delay_profile)
        if profile.shape != (len(CLASS_NAMES), N_SENSORS):
            raise ValueError(f"delay_profile must be 6x6, got {profile.shape}")
        if profile.min() < 0 or profile.max() > S_LEN - 1:
            raise ValueError("delay_profile taps must lie in [0, 1023]")
        if self.decay_constant <= 0:
            raise ValueError("decay_constant must be positive")
        if self.tap_density < 0 or self.noise_sigma < 0 or self.delay_jitter < 0:
            raise ValueError("tap_density, noise_sigma and delay_jitter must be non-negative")
        if self.n_samples < len(CLASS_NAMES):
            raise ValueError(
                f"n_samples must be at least {len(CLASS_NAMES)} (one per class), got {self.n_samples}"
            )


@dataclass
class CirDataset:
    """Samples ``cirs[i]`` (6 x 1024) with ``labels[i]`` and a train/test tag."""

    cirs: np.ndarray
    labels: np.ndarray
    is_train: np.ndarray = field(default=None)
    seed: int = 0

    def __post_init__(self):
        self.cirs = np.asarray(self.cirs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.cirs.ndim != 3 or self.cirs.shape[1:] != (N_SENSORS, S_LEN):
            raise ValueError(f"cirs must be (n, 6, 1024), got {self.cirs.shape}")
        if self.labels.shape != (len(self.cirs),):
            raise ValueError("one label per sample required")
        if self.is_train is None:
            self.is_train = np.zeros(len(self.cirs), dtype=bool)
        self.is_train = np.asarray(self.is_train, dtype=bool)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.cirs[self.is_train], self.labels[self.is_train]

    @property
    def test(self) -> tuple[np.ndarray, np.ndarray]:
        return self.cirs[~self.is_train], self.labels[~self.is_train]

    def equals(self, other: "CirDataset") -> bool:
        return (
            self.seed == other.seed
            and np.array_equal(self.cirs, other.cirs)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.is_train, other.is_train)
        )


def render_cir(delays, amplitudes, config: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    """Unnormalized 6 x 1024 magnitude CIR for given line-of-sight taps."""
    cir = np.zeros((N_SENSORS, S_LEN))
    for n in range(N_SENSORS):
        los = int(delays[n])
        cir[n, los] += amplitudes[n]
        n_echo = rng.poisson(config.tap_density) if config.tap_density > 0 else 0
        if n_echo:
            offsets = 1 + np.floor(rng.exponential(config.decay_constant, n_echo)).astype(int)
            gains = rng.uniform(0.1, 0.6, n_echo) * np.exp(-offsets / config.decay_constant)
            pos = los + offsets
            keep = pos < S_LEN
            np.add.at(cir[n], pos[keep], amplitudes[n] * gains[keep])
    if config.noise_sigma > 0:
        cir = np.abs(cir + rng.normal(0.0, config.noise_sigma, cir.shape))
    return cir


def generate(config: GeneratorConfig = GeneratorConfig()) -> CirDataset:
    """Draw a class-balanced dataset; deterministic in ``config`` (including its seed)."""
    config.validate()
    rng = substream(config.seed, "data")
    profile = np.asarray(config.delay_profile, dtype=np.float64)
    labels = np.arange(config.n_samples) % len(CLASS_NAMES)
    rng.shuffle(labels)
    cirs = np.empty((config.n_samples, N_SENSORS, S_LEN))
    for i, label in enumerate(labels):
        delays = profile[label]
        if config.delay_jitter > 0:
            delays = delays + rng.normal(0.0, config.delay_jitter, N_SENSORS)
        delays = np.clip(np.rint(delays), 0, S_LEN - 1)
        amplitudes = config.amplitude_ref / (config.amplitude_ref + delays)
        cir = render_cir(delays, amplitudes, config, rng)
        peak = cir.max()
        cirs[i] = cir / peak if peak > 0 else cir
    return CirDataset(cirs=cirs, labels=labels, seed=config.seed)


def split(dataset: CirDataset, seed: int) -> CirDataset:
    """Tag the first ceil(n/2) samples of a seeded shuffle as training data."""
    n = len(dataset)
    if n < 2:
        raise ValueError("split needs at least 2 samples")
    order = substream(seed, "split").permutation(n)
    is_train = np.zeros(n, dtype=bool)
    is_train[order[: math.ceil(n / 2)]] = True
    return replace(dataset, is_train=is_train)


class DatasetFormatError(ValueError):
    pass


def save(dataset: CirDataset, path) -> None:
    """Write the JSON-header + float64 payload + label-byte container."""
    n = len(dataset)
    header = {
        "version": FORMAT_VERSION,
        "n_samples": n,
        "n_sensors": N_SENSORS,
        "s_len": S_LEN,
        "class_names": list(CLASS_NAMES),
        "seed": int(dataset.seed),
        "split": ["train" if t else "test" for t in dataset.is_train],
    }
    payload = np.ascontiguousarray(dataset.cirs, dtype="<f8").tobytes()
    labels = dataset.labels.astype(np.uint8).tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n")
        fh.write(payload)
        fh.write(labels)
    tmp.replace(path)


def load(path) -> CirDataset:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise DatasetFormatError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"{path}: malformed header ({exc})") from None
    if not isinstance(header, dict) or "version" not in header:
        raise DatasetFormatError(f"{path}: malformed header")
    if header["version"] != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {header['version']}")
    try:
        n, n_sensors, s_len = header["n_samples"], header["n_sensors"], header["s_len"]
        tags = header["split"]
        seed = header["seed"]
    except KeyError as exc:
        raise DatasetFormatError(f"{path}: header lacks {exc}") from None
    if (n_sensors, s_len) != (N_SENSORS, S_LEN) or len(tags) != n:
        raise DatasetFormatError(f"{path}: inconsistent header dimensions")
    body = raw[nl + 1 :]
    n_float = n * n_sensors * s_len
    expected = 8 * n_float + n
    if len(body) != expected:
        raise DatasetFormatError(f"{path}: payload length mismatch (expected {expected} bytes, found {len(body)})")
    cirs = np.frombuffer(body, dtype="<f8", count=n_float).reshape(n, n_sensors, s_len).astype(np.float64)
    labels = np.frombuffer(body, dtype=np.uint8, offset=8 * n_float).astype(np.int64)
    is_train = np.array([t == "train" for t in tags], dtype=bool)
    return CirDataset(cirs=cirs, labels=labels, is_train=is_train, seed=seed)
