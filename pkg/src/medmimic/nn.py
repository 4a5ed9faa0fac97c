"""Differentiable building blocks with explicit forward/backward passes:
linear, batch norm, ReLU, dropout, softmax cross-entropy, Adam, the
cosine learning-rate schedule, the seeded RNG, and a central-difference
gradient checker.

All math is float64. Matrices are (features, batch) columns-per-sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateLabelsError,
    NumericError,
    ParameterError,
    ShapeError,
)


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the stream is platform-portable and a
    golden test pins the first draws for seed 42."""
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# Layers


@dataclass
class Linear:
    """out = W @ X + b, with X of shape (in_dim, B)."""

    W: np.ndarray
    b: np.ndarray
    _x: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def init(cls, out_dim: int, in_dim: int, rng: np.random.Generator) -> "Linear":
        # He-style scaled uniform for ReLU stacks.
        bound = math.sqrt(6.0 / in_dim)
        W = rng.uniform(-bound, bound, size=(out_dim, in_dim))
        return cls(W=W, b=np.zeros(out_dim))

    @classmethod
    def zeros(cls, out_dim: int, in_dim: int) -> "Linear":
        return cls(W=np.zeros((out_dim, in_dim)), b=np.zeros(out_dim))

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[0] != self.W.shape[1]:
            raise ShapeError(
                f"linear expects ({self.W.shape[1]}, B), got {x.shape}"
            )
        self._x = x
        return self.W @ x + self.b[:, None]

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns (grad_x, grad_W, grad_b)."""
        if self._x is None:
            raise ShapeError("backward before forward")
        if grad.shape != (self.W.shape[0], self._x.shape[1]):
            raise ShapeError(f"bad upstream gradient shape {grad.shape}")
        return self.W.T @ grad, grad @ self._x.T, grad.sum(axis=1)

    def params(self) -> list[np.ndarray]:
        return [self.W, self.b]


@dataclass
class BatchNorm:
    """Per-feature batch normalization over the batch axis."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    _cache: tuple | None = field(default=None, repr=False)

    @classmethod
    def init(cls, dim: int) -> "BatchNorm":
        return cls(
            gamma=np.ones(dim),
            beta=np.zeros(dim),
            running_mean=np.zeros(dim),
            running_var=np.ones(dim),
        )

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if x.ndim != 2 or x.shape[0] != self.gamma.shape[0]:
            raise ShapeError(f"batchnorm expects ({self.gamma.shape[0]}, B), got {x.shape}")
        if train:
            if x.shape[1] < 2:
                raise ShapeError("train-mode batchnorm needs batch size >= 2")
            mu = x.mean(axis=1)
            var = x.var(axis=1)  # population variance
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mu
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var
        else:
            mu, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu[:, None]) * inv_std[:, None]
        self._cache = (xhat, inv_std, train)
        return self.gamma[:, None] * xhat + self.beta[:, None]

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns (grad_x, grad_gamma, grad_beta)."""
        if self._cache is None:
            raise ShapeError("backward before forward")
        xhat, inv_std, train = self._cache
        if grad.shape != xhat.shape:
            raise ShapeError(f"bad upstream gradient shape {grad.shape}")
        g_gamma = (grad * xhat).sum(axis=1)
        g_beta = grad.sum(axis=1)
        g_xhat = grad * self.gamma[:, None]
        if train:
            b = xhat.shape[1]
            g_x = (
                inv_std[:, None]
                / b
                * (
                    b * g_xhat
                    - g_xhat.sum(axis=1, keepdims=True)
                    - xhat * (g_xhat * xhat).sum(axis=1, keepdims=True)
                )
            )
        else:
            g_x = g_xhat * inv_std[:, None]
        return g_x, g_gamma, g_beta

    def params(self) -> list[np.ndarray]:
        return [self.gamma, self.beta]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad * (x > 0)


def dropout_mask(shape: tuple, p_drop: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability p_drop, else 1/(1-p)."""
    if not 0.0 <= p_drop < 1.0:
        raise ParameterError(f"p_drop must be in [0, 1), got {p_drop}")
    if p_drop == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= p_drop
    return keep / (1.0 - p_drop)


def dropout(
    x: np.ndarray, p_drop: float, rng: np.random.Generator, train: bool
) -> tuple[np.ndarray, np.ndarray]:
    """Returns (output, mask); eval mode is the identity (mask of ones)."""
    if not train or p_drop == 0.0:
        if not 0.0 <= p_drop < 1.0:
            raise ParameterError(f"p_drop must be in [0, 1), got {p_drop}")
        mask = np.ones_like(x)
    else:
        mask = dropout_mask(x.shape, p_drop, rng)
    return x * mask, mask


def softmax(logits: np.ndarray) -> np.ndarray:
    """Columnwise softmax with max-subtraction stabilization."""
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def softmax_cross_entropy(
    logits: np.ndarray, onehot: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy over the batch.

    Returns (loss, probs, grad_logits) with grad_logits = (probs - onehot)/B.
    """
    if logits.shape != onehot.shape:
        raise ShapeError(f"logits {logits.shape} vs onehot {onehot.shape}")
    col_sums = onehot.sum(axis=0)
    if not np.allclose(col_sums, 1.0) or not np.all(
        (onehot == 0) | (onehot == 1)
    ):
        raise DegenerateLabelsError("onehot columns must contain a single 1")
    probs = softmax(logits)
    b = logits.shape[1]
    picked = np.clip((probs * onehot).sum(axis=0), 1e-300, None)
    loss = float(-np.log(picked).mean())
    if not math.isfinite(loss):
        raise NumericError("non-finite cross-entropy loss")
    grad = (probs - onehot) / b
    return loss, probs, grad


def onehot_encode(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise DegenerateLabelsError("label index out of range")
    out = np.zeros((n_classes, labels.size))
    out[labels, np.arange(labels.size)] = 1.0
    return out


# ---------------------------------------------------------------------------
# Optimization


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[np.ndarray], **kwargs) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **kwargs,
        )


def adam_step(
    state: AdamState,
    params: list[np.ndarray],
    grads: list[np.ndarray],
    lr: float,
) -> None:
    """Bias-corrected Adam update, applied to params in place."""
    if lr < 0:
        raise ParameterError("lr must be >= 0")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params/grads/state length mismatch")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"param {p.shape} vs grad {g.shape}")
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass(frozen=True)
class LrSchedule:
    lr_max: float
    lr_min: float = 0.0
    total_steps: int = 1

    def __post_init__(self):
        if not (self.lr_max >= self.lr_min >= 0):
            raise ParameterError("need lr_max >= lr_min >= 0")
        if self.total_steps < 1:
            raise ParameterError("total_steps must be >= 1")


def cosine_lr(schedule: LrSchedule, t: int) -> float:
    """lr(t) = lr_min + (lr_max - lr_min) * (1 + cos(pi t / T)) / 2."""
    if not 0 <= t <= schedule.total_steps:
        raise ParameterError(f"step {t} outside [0, {schedule.total_steps}]")
    span = schedule.lr_max - schedule.lr_min
    return schedule.lr_min + 0.5 * span * (1.0 + math.cos(math.pi * t / schedule.total_steps))


# ---------------------------------------------------------------------------
# Verification


def grad_check(loss_fn, theta: np.ndarray, analytic_grad: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between analytic_grad and central differences
    of loss_fn around theta.

    relative error per coordinate: |ga - gn| / max(1, |ga| + |gn|).
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ParameterError(f"eps {eps} outside [1e-7, 1e-4]")
    theta = np.asarray(theta, dtype=np.float64)
    worst = 0.0
    for i in range(theta.size):
        bump = np.zeros_like(theta)
        bump[i] = eps
        lp = loss_fn(theta + bump)
        lm = loss_fn(theta - bump)
        if not (math.isfinite(lp) and math.isfinite(lm)):
            raise NumericError("non-finite loss during gradient check")
        gn = (lp - lm) / (2 * eps)
        ga = analytic_grad[i]
        err = abs(ga - gn) / max(1.0, abs(ga) + abs(gn))
        worst = max(worst, err)
    return worst
