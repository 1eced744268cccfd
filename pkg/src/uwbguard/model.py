"""Patch-block CIR classifier: training, inference, input gradients and weight files.

Layout for an input ``x`` of shape (6, 1024): four non-overlapping 6 x 256 time
patches, each passed through its own batch-norm layer and a mean/variance
subtraction; the patches are concatenated back into the 6 x 1024 intermediate
response, followed by one 3 x 3 convolution, flatten, a dense 6144 -> 6 head
and softmax.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from uwbguard import numerics as nx
from uwbguard.numerics import BatchNormState, Mode
from uwbguard.seeding import substream

log = logging.getLogger(__name__)

N_SENSORS = 6
S_LEN = 1024
N_BLOCKS = 4
PATCH = S_LEN // N_BLOCKS
N_CLASSES = 6
FLAT = N_SENSORS * S_LEN


@dataclass
class ModelParams:
    bn_states: list[BatchNormState]
    conv_kernel: np.ndarray
    conv_bias: float
    head_weights: np.ndarray
    head_bias: np.ndarray
    l2_lambda: float = 1e-4

    def __post_init__(self):
        if len(self.bn_states) != N_BLOCKS:
            raise ValueError(f"expected {N_BLOCKS} batch-norm blocks, got {len(self.bn_states)}")
        self.conv_kernel = np.asarray(self.conv_kernel, dtype=np.float64)
        self.head_weights = np.asarray(self.head_weights, dtype=np.float64)
        self.head_bias = np.asarray(self.head_bias, dtype=np.float64)
        self.conv_bias = float(self.conv_bias)
        if self.conv_kernel.shape != (3, 3):
            raise ValueError("conv_kernel must be 3x3")
        if self.head_weights.shape != (FLAT, N_CLASSES) or self.head_bias.shape != (N_CLASSES,):
            raise ValueError("head shape mismatch")

    def arrays(self) -> dict[str, np.ndarray]:
        """Trainable tensors by name, in canonical order."""
        out = {}
        for k, bn in enumerate(self.bn_states):
            out[f"bn{k}.gamma"] = bn.gamma
            out[f"bn{k}.beta"] = bn.beta
        out["conv.kernel"] = self.conv_kernel
        out["conv.bias"] = np.array(self.conv_bias)
        out["head.weights"] = self.head_weights
        out["head.bias"] = self.head_bias
        return out

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "ModelParams":
        bns = [
            replace(bn, gamma=arrays[f"bn{k}.gamma"], beta=arrays[f"bn{k}.beta"])
            for k, bn in enumerate(self.bn_states)
        ]
        return replace(
            self,
            bn_states=bns,
            conv_kernel=arrays["conv.kernel"],
            conv_bias=float(arrays["conv.bias"]),
            head_weights=arrays["head.weights"],
            head_bias=arrays["head.bias"],
        )

    def equals(self, other: "ModelParams") -> bool:
        a, b = self.arrays(), other.arrays()
        if self.l2_lambda != other.l2_lambda or any(not np.array_equal(a[k], b[k]) for k in a):
            return False
        return all(
            np.array_equal(p.running_mean, q.running_mean)
            and np.array_equal(p.running_var, q.running_var)
            and p.momentum == q.momentum
            and p.epsilon_bn == q.epsilon_bn
            for p, q in zip(self.bn_states, other.bn_states)
        )


def _glorot(rng, shape, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, shape)


def init_params(
    seed: int = 0, l2_lambda: float = 1e-4, momentum: float = 0.9, bn_gamma_init: float = 1.0
) -> ModelParams:
    rng = substream(seed, "init")
    bns = []
    for _ in range(N_BLOCKS):
        bn = BatchNormState.fresh(N_SENSORS, momentum=momentum)
        bns.append(replace(bn, gamma=np.full(N_SENSORS, bn_gamma_init)))
    return ModelParams(
        bn_states=bns,
        conv_kernel=_glorot(rng, (3, 3), 9, 9),
        conv_bias=0.0,
        head_weights=_glorot(rng, (FLAT, N_CLASSES), FLAT, N_CLASSES),
        head_bias=np.zeros(N_CLASSES),
        l2_lambda=l2_lambda,
    )


@dataclass
class ForwardOutput:
    logits: np.ndarray
    probs: np.ndarray
    intermediate: np.ndarray
    prediction: np.ndarray
    record: dict = field(default=None, repr=False)


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2:] != (N_SENSORS, S_LEN):
        raise ValueError(f"input must end in ({N_SENSORS}, {S_LEN}), got {x.shape}")
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ValueError(f"input must be 2-D or 3-D, got {x.shape}")
    return x, False


def _intermediate(x: np.ndarray, params: ModelParams, mode: Mode):
    blocks, caches = [], []
    for k, bn in enumerate(params.bn_states):
        patch = x[..., k * PATCH : (k + 1) * PATCH]
        y, bn_cache = nx.batchnorm_forward(patch, bn, mode)
        z, mvs_cache = nx.mean_var_subtract_forward(y)
        blocks.append(z)
        caches.append((bn_cache, mvs_cache))
    return np.concatenate(blocks, axis=-1), caches


def intermediate(x, params: ModelParams, mode: Mode = Mode.RUNNING) -> np.ndarray:
    """Post-concatenation response only (the blocks, no conv or head)."""
    xb, single = _as_batch(x)
    out, _ = _intermediate(xb, params, mode)
    return out[0] if single else out


def forward(x, params: ModelParams, mode: Mode = Mode.RUNNING, keep_record: bool = False) -> ForwardOutput:
    """Run the full classifier on one sample (6, 1024) or a batch (B, 6, 1024)."""
    xb, single = _as_batch(x)
    inter, block_caches = _intermediate(xb, params, mode)
    conv, conv_cache = nx.conv2d_same_forward(inter, params.conv_kernel, params.conv_bias)
    flat = conv.reshape(len(xb), FLAT)
    logits, dense_cache = nx.dense_forward(flat, params.head_weights, params.head_bias)
    probs = nx.softmax(logits)
    record = None
    if keep_record:
        record = {"blocks": block_caches, "conv": conv_cache, "dense": dense_cache, "mode": mode}
    if single:
        return ForwardOutput(logits[0], probs[0], inter[0], probs[0].argmax(), record)
    return ForwardOutput(logits, probs, inter, probs.argmax(axis=-1), record)


@dataclass
class Gradients:
    d_input: np.ndarray
    d_params: dict[str, np.ndarray]


def backward(record: dict, dlogits: np.ndarray) -> Gradients:
    """Reverse pass through a recorded forward; ``dlogits`` is (B, 6)."""
    dlogits = np.atleast_2d(dlogits)
    dflat, dW, db = nx.dense_backward(dlogits, record["dense"])
    dconv = dflat.reshape(len(dlogits), N_SENSORS, S_LEN)
    dinter, dkernel, dcbias = nx.conv2d_same_backward(dconv, record["conv"])
    grads = {}
    dx = np.empty_like(dinter)
    for k, (bn_cache, mvs_cache) in enumerate(record["blocks"]):
        sl = slice(k * PATCH, (k + 1) * PATCH)
        dy = nx.mean_var_subtract_backward(dinter[..., sl], mvs_cache)
        dx[..., sl], grads[f"bn{k}.gamma"], grads[f"bn{k}.beta"] = nx.batchnorm_backward(dy, bn_cache)
    grads["conv.kernel"] = dkernel
    grads["conv.bias"] = np.array(dcbias)
    grads["head.weights"] = dW
    grads["head.bias"] = db
    return Gradients(d_input=dx, d_params=grads)


def loss_and_gradients(x, labels, params: ModelParams, mode: Mode = Mode.RUNNING):
    """Mean cross-entropy plus the conv-kernel L2 penalty, with exact gradients.

    Returns ``(loss, Gradients, ForwardOutput)``.
    """
    xb, _ = _as_batch(x)
    labels = np.atleast_1d(labels)
    out = forward(xb, params, mode, keep_record=True)
    b = len(xb)
    loss = nx.cross_entropy(out.probs, labels).mean() + params.l2_lambda * np.sum(params.conv_kernel**2)
    grads = backward(out.record, nx.softmax_cross_entropy_backward(out.probs, labels) / b)
    grads.d_params["conv.kernel"] = grads.d_params["conv.kernel"] + 2.0 * params.l2_lambda * params.conv_kernel
    return loss, grads, out


def input_gradient(x, label, params: ModelParams) -> np.ndarray:
    """d cross_entropy / d x in RUNNING mode, per sample (no batch averaging)."""
    xb, single = _as_batch(x)
    labels = np.broadcast_to(np.atleast_1d(label), (len(xb),))
    out = forward(xb, params, Mode.RUNNING, keep_record=True)
    grads = backward(out.record, nx.softmax_cross_entropy_backward(out.probs, labels))
    return grads.d_input[0] if single else grads.d_input


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 0.01
    l2_lambda: float = 1e-4
    bn_gamma_init: float = 1.0
    train_bn_affine: bool = True
    optimizer: str = "sgd"
    seed: int = 0

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0 or self.l2_lambda < 0:
            raise ValueError(f"invalid training config: {self}")


class GradientDescent:
    def __init__(self, learning_rate: float):
        self.lr = learning_rate

    def step(self, arrays, grads):
        return {k: a - self.lr * grads[k] for k, a in arrays.items()}


class Adam:
    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = learning_rate, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, arrays, grads):
        self.t += 1
        out = {}
        for k, a in arrays.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            m_hat = self.m[k] / (1 - self.b1**self.t)
            v_hat = self.v[k] / (1 - self.b2**self.t)
            out[k] = a - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


def _make_optimizer(config: "TrainConfig"):
    if config.optimizer == "adam":
        return Adam(config.learning_rate)
    if config.optimizer == "sgd":
        return GradientDescent(config.learning_rate)
    raise ValueError(f"unknown optimizer {config.optimizer!r}")


def train(data, config: TrainConfig = TrainConfig(), params: ModelParams | None = None) -> ModelParams:
    """Mini-batch gradient descent on the training split of ``data``.

    ``data`` is a :class:`~uwbguard.dataset.CirDataset` (its train split is used)
    or an ``(x, y)`` pair. Batch-norm layers use batch statistics and update
    their running statistics once per step.
    """
    config.validate()
    if isinstance(data, tuple):
        x, y = data
    else:
        x, y = data.train
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("empty training split")
    if params is None:
        params = init_params(config.seed, config.l2_lambda, bn_gamma_init=config.bn_gamma_init)
    else:
        params = replace(params, l2_lambda=config.l2_lambda)
    rng = substream(config.seed, "shuffle")
    frozen = set() if config.train_bn_affine else {k for k in params.arrays() if k.startswith("bn")}
    opt = _make_optimizer(config)
    for epoch in range(config.epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads, out = loss_and_gradients(x[idx], y[idx], params, Mode.BATCH)
            total += loss * len(idx)
            arrays = params.arrays()
            stepped = opt.step({k: a for k, a in arrays.items() if k not in frozen}, grads.d_params)
            params = params.with_arrays({**arrays, **stepped})
            bns = [
                bn.updated(bn_cache.batch_mean, bn_cache.batch_var)
                for bn, (bn_cache, _) in zip(params.bn_states, out.record["blocks"])
            ]
            params = replace(params, bn_states=bns)
        if epoch % 50 == 0 or epoch == config.epochs - 1:
            log.debug("epoch %d loss %.5f", epoch, total / len(x))
    return params


def accuracy(x, y, params: ModelParams) -> float:
    return float(np.mean(forward(x, params).prediction == np.asarray(y)))


MAGIC = b"UWBM"
WEIGHT_VERSION = 1


class WeightFormatError(ValueError):
    pass


def _payload_arrays(params: ModelParams) -> dict[str, np.ndarray]:
    arrays = dict(params.arrays())
    for k, bn in enumerate(params.bn_states):
        arrays[f"bn{k}.running_mean"] = bn.running_mean
        arrays[f"bn{k}.running_var"] = bn.running_var
    return arrays


def save_params(params: ModelParams, path) -> int:
    """Write a weight file; returns its size in bytes.

    Layout: ``UWBM``, version byte, uint32 LE manifest length, JSON manifest,
    then float64 LE payloads in manifest order.
    """
    arrays = _payload_arrays(params)
    manifest = {
        "tensors": [[name, list(np.shape(a))] for name, a in arrays.items()],
        "l2_lambda": params.l2_lambda,
        "bn_momentum": [bn.momentum for bn in params.bn_states],
        "bn_epsilon": [bn.epsilon_bn for bn in params.bn_states],
    }
    blob = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    data = MAGIC + bytes([WEIGHT_VERSION]) + struct.pack("<I", len(blob)) + blob + body
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return len(data)


def load_params(path) -> tuple[ModelParams, int]:
    """Read a weight file; returns ``(params, size_in_bytes)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise WeightFormatError(f"{path}: bad magic bytes")
    if len(raw) < 9 or raw[4] != WEIGHT_VERSION:
        raise WeightFormatError(f"{path}: unsupported weight file version")
    (mlen,) = struct.unpack("<I", raw[5:9])
    try:
        manifest = json.loads(raw[9 : 9 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise WeightFormatError(f"{path}: malformed manifest") from None
    offset = 9 + mlen
    arrays = {}
    for name, shape in manifest["tensors"]:
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(raw):
            raise WeightFormatError(f"{path}: truncated payload at {name}")
        arrays[name] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise WeightFormatError(f"{path}: trailing bytes after payload")
    try:
        bns = [
            BatchNormState(
                gamma=arrays[f"bn{k}.gamma"],
                beta=arrays[f"bn{k}.beta"],
                running_mean=arrays[f"bn{k}.running_mean"],
                running_var=arrays[f"bn{k}.running_var"],
                momentum=manifest["bn_momentum"][k],
                epsilon_bn=manifest["bn_epsilon"][k],
            )
            for k in range(N_BLOCKS)
        ]
        params = ModelParams(
            bn_states=bns,
            conv_kernel=arrays["conv.kernel"],
            conv_bias=float(arrays["conv.bias"]),
            head_weights=arrays["head.weights"],
            head_bias=arrays["head.bias"],
            l2_lambda=manifest["l2_lambda"],
        )
    except (KeyError, IndexError, ValueError) as exc:
        raise WeightFormatError(f"{path}: shape or manifest mismatch ({exc})") from None
    return params, len(raw)
