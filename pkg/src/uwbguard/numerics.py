"""Forward and reverse-mode kernels for the patch-block CIR classifier.

Tensors are plain float64 ``numpy`` arrays. Every layer comes as a pair:
``<op>_forward`` returns ``(out, cache)`` and ``<op>_backward`` maps the
upstream gradient and that cache to input (and parameter) gradients. Leading
axes are treated as batch axes unless stated otherwise.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

PROB_FLOOR = 1e-12


class Mode(enum.Enum):
    """Source of the normalization statistics used by a batch-norm layer."""

    RUNNING = "running"  # stored running mean/var (inference)
    SELF = "self"  # per-sample stats over the time axis (momentum zero)
    BATCH = "batch"  # stats over batch and time axes (training)


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics of one BN layer."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon_bn: float = 1e-5

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.running_mean = np.asarray(self.running_mean, dtype=np.float64)
        self.running_var = np.asarray(self.running_var, dtype=np.float64)
        n = self.gamma.shape
        if not (self.beta.shape == self.running_mean.shape == self.running_var.shape == n):
            raise ValueError("batch-norm vectors must share one channel count")
        if self.epsilon_bn <= 0:
            raise ValueError(f"epsilon_bn must be positive, got {self.epsilon_bn}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {self.momentum}")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.9, epsilon_bn: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=momentum,
            epsilon_bn=epsilon_bn,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def updated(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> "BatchNormState":
        """Return a copy with running stats blended toward a batch's statistics."""
        m = self.momentum
        return replace(
            self,
            running_mean=m * self.running_mean + (1.0 - m) * batch_mean,
            running_var=m * self.running_var + (1.0 - m) * batch_var,
        )


@dataclass
class _BNCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    mode: Mode
    axes: tuple = field(default=())
    batch_mean: np.ndarray | None = None
    batch_var: np.ndarray | None = None


def batchnorm_forward(x: np.ndarray, state: BatchNormState, mode: Mode = Mode.RUNNING):
    """Normalize ``x[..., N, S]`` per channel ``N``.

    RUNNING uses the stored statistics, SELF the statistics of each sample's
    own time axis, BATCH the statistics pooled over all leading axes and time.
    Variances are population variances.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2] != state.channels:
        raise ValueError(f"expected {state.channels} channels on axis -2, got shape {x.shape}")
    eps = state.epsilon_bn
    gamma = state.gamma[:, None]
    beta = state.beta[:, None]
    cache = _BNCache(xhat=None, inv_std=None, gamma=gamma, mode=mode)
    if mode is Mode.RUNNING:
        inv_std = 1.0 / np.sqrt(state.running_var + eps)[:, None]
        xhat = (x - state.running_mean[:, None]) * inv_std
    elif mode is Mode.SELF:
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean) * inv_std
        cache.axes = (-1,)
    elif mode is Mode.BATCH:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1,)
        mean = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean) * inv_std
        cache.axes = axes
        cache.batch_mean = mean.reshape(-1)
        cache.batch_var = var.reshape(-1)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    cache.xhat = xhat
    cache.inv_std = inv_std
    return gamma * xhat + beta, cache


def batchnorm_backward(dout: np.ndarray, cache: _BNCache):
    """Return ``(dx, dgamma, dbeta)``; differentiates through SELF/BATCH statistics."""
    xhat = cache.xhat
    param_axes = tuple(i for i in range(dout.ndim) if i != dout.ndim - 2)
    dgamma = (dout * xhat).sum(axis=param_axes)
    dbeta = dout.sum(axis=param_axes)
    dxhat = dout * cache.gamma
    if cache.mode is Mode.RUNNING:
        return dxhat * cache.inv_std, dgamma, dbeta
    axes = cache.axes
    mean_d = dxhat.mean(axis=axes, keepdims=True)
    mean_dx = (dxhat * xhat).mean(axis=axes, keepdims=True)
    dx = cache.inv_std * (dxhat - mean_d - xhat * mean_dx)
    return dx, dgamma, dbeta


def mean_var_subtract_forward(x: np.ndarray):
    """Subtract each row's mean and population variance along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered**2).mean(axis=-1, keepdims=True)
    return x - mean - var, centered


def mean_var_subtract_backward(dout: np.ndarray, centered: np.ndarray) -> np.ndarray:
    s = dout.shape[-1]
    total = dout.sum(axis=-1, keepdims=True)
    return dout - total / s - (2.0 / s) * centered * total


def conv2d_same_forward(x: np.ndarray, kernel: np.ndarray, bias: float):
    """3x3 cross-correlation with zero 'same' padding over the last two axes."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.shape != (3, 3):
        raise ValueError(f"kernel must be 3x3, got {kernel.shape}")
    if x.ndim < 2 or x.shape[-1] < 3:
        raise ValueError(f"input needs H >= 1 and W >= 3, got shape {x.shape}")
    h, w = x.shape[-2:]
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    xp = np.pad(x, pad)
    out = np.full(x.shape, float(bias))
    for i in range(3):
        for j in range(3):
            out += kernel[i, j] * xp[..., i : i + h, j : j + w]
    return out, (xp, kernel)


def conv2d_same_backward(dout: np.ndarray, cache):
    """Return ``(dx, dkernel, dbias)``."""
    xp, kernel = cache
    h, w = dout.shape[-2:]
    dxp = np.zeros_like(xp)
    dkernel = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            dxp[..., i : i + h, j : j + w] += kernel[i, j] * dout
            dkernel[i, j] = np.sum(dout * xp[..., i : i + h, j : j + w])
    return dxp[..., 1:-1, 1:-1], dkernel, float(dout.sum())


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray):
    """Affine map ``x @ weights + bias`` on the last axis of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise ValueError(
            f"dense shape mismatch: x {x.shape}, weights {weights.shape}, bias {bias.shape}"
        )
    return x @ weights + bias, (x, weights)


def dense_backward(dout: np.ndarray, cache):
    """Return ``(dx, dweights, dbias)``; leading axes of ``dout`` are summed for params."""
    x, weights = cache
    dx = dout @ weights.T
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    return dx, x2.T @ d2, d2.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, label, floor: float = PROB_FLOOR):
    """Negative log-probability of ``label``; works per row for batched input."""
    probs = np.asarray(probs, dtype=np.float64)
    label = np.asarray(label)
    c = probs.shape[-1]
    if np.any(label < 0) or np.any(label >= c):
        raise ValueError(f"label out of range for {c} classes: {label}")
    picked = np.take_along_axis(probs, label[..., None], axis=-1)[..., 0]
    return -np.log(np.maximum(picked, floor))


def softmax_cross_entropy_backward(probs: np.ndarray, label) -> np.ndarray:
    """Gradient of ``cross_entropy(softmax(logits), label)`` w.r.t. the logits."""
    grad = np.array(probs, dtype=np.float64, copy=True)
    label = np.asarray(label)
    np.put_along_axis(grad, label[..., None], np.take_along_axis(grad, label[..., None], -1) - 1.0, -1)
    return grad


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
