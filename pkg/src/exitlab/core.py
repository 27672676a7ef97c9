"""Small differentiable kernel: dense layers, ReLU, softmax cross-entropy, SGD.

Everything is float64. Layers cache their inputs on ``forward(..., record=True)``
and accumulate exact gradients into :class:`Parameter.grad` on ``backward``.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, NumericError, UsageError

PROB_FLOOR = 1e-12
DTYPE = np.float64


@dataclass(eq=False)
class Parameter:
    values: np.ndarray
    grad: np.ndarray = field(default=None)
    name: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        if self.grad.shape != self.values.shape:
            raise ConfigError(f"grad shape {self.grad.shape} != values shape {self.values.shape}")

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)

    def zero_grad(self):
        self.grad[...] = 0.0


class Rng:
    """Seeded Philox streams, one independent substream per named purpose.

    ``Rng(7).stream("init")`` always yields the same generator state, and
    differently named streams never overlap.
    """

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned int, got {seed}")
        self.seed = int(seed)

    def stream(self, purpose: str, *keys: int) -> np.random.Generator:
        spawn_key = (zlib.crc32(purpose.encode("utf-8")),) + tuple(int(k) for k in keys)
        ss = np.random.SeedSequence(self.seed, spawn_key=spawn_key)
        return np.random.Generator(np.random.Philox(ss))

    def __repr__(self):
        return f"Rng({self.seed})"


def glorot_uniform(gen: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-limit, limit, size=(fan_out, fan_in))


# --------------------------------------------------------------------------
# functional ops (work on a single vector or on a batch of row vectors)
# --------------------------------------------------------------------------

def affine(W: Parameter, b: Parameter, x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if W.values.ndim != 2 or b.values.ndim != 1:
        raise ConfigError("affine expects a 2-D weight and a 1-D bias")
    out_dim, in_dim = W.values.shape
    if x.shape[-1] != in_dim or b.values.shape[0] != out_dim:
        raise ConfigError(
            f"affine dimension mismatch: W{W.values.shape}, b{b.values.shape}, x{x.shape}"
        )
    return x @ W.values.T + b.values


def relu(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    return np.where(x > 0.0, x, 0.0)


def softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=DTYPE)
    if z.shape[-1] < 2:
        raise ConfigError("softmax needs at least two logits")
    if np.isnan(z).any():
        raise NumericError("NaN logit passed to softmax")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(y, P) -> float | np.ndarray:
    """H(y, P) for one-hot ``y``; batched inputs give one loss per row."""
    y = np.asarray(y, dtype=DTYPE)
    P = np.asarray(P, dtype=DTYPE)
    if y.shape != P.shape:
        raise ConfigError(f"cross_entropy shape mismatch: {y.shape} vs {P.shape}")
    p_true = (y * P).sum(axis=-1)
    out = -np.log(np.maximum(p_true, PROB_FLOOR))
    return float(out) if out.ndim == 0 else out


def nll(labels: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Cross-entropy with integer labels, one value per row of ``P``."""
    p_true = P[np.arange(P.shape[0]), labels]
    return -np.log(np.maximum(p_true, PROB_FLOOR))


def argmax_low(P: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest class
    return np.argmax(P, axis=-1)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros(labels.shape + (num_classes,), dtype=DTYPE)
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def softmax_xent_grad(P: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """d/dlogits of sum_i weights[i] * H(y_i, softmax(logits_i))."""
    g = P.copy()
    g[np.arange(P.shape[0]), labels] -= 1.0
    return g * weights[:, None]


# --------------------------------------------------------------------------
# layers with a recorded forward and an exact backward
# --------------------------------------------------------------------------

class Dense:
    def __init__(self, in_dim: int, out_dim: int, gen: np.random.Generator | None = None,
                 name: str = "dense"):
        if in_dim < 1 or out_dim < 1:
            raise ConfigError(f"{name}: dims must be >= 1, got ({out_dim}, {in_dim})")
        W = glorot_uniform(gen, out_dim, in_dim) if gen is not None else np.zeros((out_dim, in_dim))
        self.W = Parameter(W, name=f"{name}.W")
        self.b = Parameter(np.zeros(out_dim), name=f"{name}.b")
        self._x = None

    @property
    def params(self) -> list[Parameter]:
        return [self.W, self.b]

    def forward(self, x: np.ndarray, record: bool = False) -> np.ndarray:
        out = affine(self.W, self.b, x)
        if record:
            self._x = np.asarray(x, dtype=DTYPE)
        return out

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise UsageError(f"{self.W.name}: backward called without a recorded forward")
        x = self._x
        if x.ndim == 1:
            self.W.grad += np.outer(dy, x)
            self.b.grad += dy
        else:
            self.W.grad += dy.T @ x
            self.b.grad += dy.sum(axis=0)
        return dy @ self.W.values

    def clear(self):
        self._x = None


class ReLU:
    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray, record: bool = False) -> np.ndarray:
        mask = x > 0.0
        if record:
            self._mask = mask
        return np.where(mask, x, 0.0)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._mask is None:
            raise UsageError("relu: backward called without a recorded forward")
        return np.where(self._mask, dy, 0.0)

    def clear(self):
        self._mask = None


class SoftmaxCrossEntropy:
    """Loss tail: mean (or weighted sum) of H(y, softmax(logits)) over rows."""

    def __init__(self):
        self._cache = None

    def forward(self, logits: np.ndarray, labels: np.ndarray, weights: np.ndarray | None = None):
        logits = np.atleast_2d(logits)
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        if weights is None:
            weights = np.full(len(labels), 1.0 / len(labels))
        P = softmax(logits)
        self._cache = (P, labels, np.asarray(weights, dtype=DTYPE))
        return float((weights * nll(labels, P)).sum())

    def backward(self) -> np.ndarray:
        if self._cache is None:
            raise UsageError("loss: backward called without a recorded forward")
        return softmax_xent_grad(*self._cache)


# --------------------------------------------------------------------------
# optimisation and gradient verification
# --------------------------------------------------------------------------

def zero_grads(params: Iterable[Parameter]):
    for p in params:
        p.zero_grad()


def sgd_step(params: Iterable[Parameter], lr: float):
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    for p in params:
        p.values -= lr * p.grad
        p.zero_grad()


def finite_diff_check(loss_and_grad: Callable[[], float], params: Sequence[Parameter],
                      h: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_and_grad`` must run a forward + backward pass, accumulate into the
    ``grad`` of every parameter in ``params`` and return the scalar loss.
    Relative error uses the denominator max(|analytic|, |numeric|, 1e-8).
    """
    if not 1e-6 <= h <= 1e-3:
        raise ConfigError(f"finite-difference step must lie in [1e-6, 1e-3], got {h}")
    zero_grads(params)
    loss_and_grad()
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.values.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_and_grad()
            flat[i] = orig - h
            f_minus = loss_and_grad()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    zero_grads(params)
    return worst
