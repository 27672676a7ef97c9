"""Early-exit inference, metrics, the entropy-threshold baseline and alpha sweeps."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core import DTYPE, argmax_low
from .data import Dataset
from .errors import ConfigError, DataError
from .model import BackboneConfig, ModelBundle
from .core import Rng

EXIT_THRESHOLD = 0.5
DEFAULT_ALPHAS = tuple(round(0.005 * k, 3) for k in range(9))


@dataclass
class InferenceResult:
    prediction: int
    exit_layer: int
    p_exit_trace: list[float]


@dataclass(frozen=True)
class EvalMetrics:
    accuracy: float
    mean_exit_layer: float
    saved_layers: float
    n: int = 0


def metrics_from(predictions, labels, exit_layers, L: int) -> EvalMetrics:
    predictions, labels, exit_layers = map(np.asarray, (predictions, labels, exit_layers))
    if len(labels) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    mean_exit = float(exit_layers.mean())
    return EvalMetrics(float((predictions == labels).mean()), mean_exit,
                       1.0 - mean_exit / L, int(len(labels)))


def infer(m: ModelBundle, x) -> InferenceResult:
    """Exit at the first layer whose exit probability is strictly above 0.5.

    Layers past the exit layer are never computed.
    """
    L = m.num_layers
    s = np.asarray(x, dtype=DTYPE)
    trace = []
    for t in range(1, L + 1):
        s = m.step(t, s)
        p = float(m.exit_prob(t, s))
        trace.append(p)
        if p > EXIT_THRESHOLD or t == L:
            return InferenceResult(int(argmax_low(m.classify(t, s))), t, trace)


def exit_decisions(m: ModelBundle, data: Dataset):
    """Vectorised ``infer`` over a dataset: (predictions, exit layers)."""
    P, E = m.all_probs(data.X)
    L = m.num_layers
    fire = E > EXIT_THRESHOLD
    fire[-1] = True
    T = np.argmax(fire, axis=0) + 1
    preds = argmax_low(P[T - 1, np.arange(len(T))])
    return preds, T


def evaluate(m: ModelBundle, data: Dataset) -> EvalMetrics:
    if len(data) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    preds, T = exit_decisions(m, data)
    return metrics_from(preds, data.y, T, m.num_layers)


def evaluate_full_depth(m: ModelBundle, data: Dataset) -> EvalMetrics:
    """The no-acceleration baseline: always predict with the last classifier."""
    if len(data) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    P, _ = m.all_probs(data.X)
    L = m.num_layers
    return metrics_from(argmax_low(P[-1]), data.y, np.full(len(data), L), L)


def entropy(P) -> np.ndarray:
    P = np.asarray(P, dtype=DTYPE)
    return -(np.where(P > 0, P * np.log(np.where(P > 0, P, 1.0)), 0.0)).sum(axis=-1)


def entropy_exit_infer(m: ModelBundle, x, threshold: float) -> InferenceResult:
    """Baseline exiter: stop at the first layer whose prediction entropy < threshold."""
    if threshold < 0:
        raise ConfigError(f"entropy threshold must be >= 0, got {threshold}")
    L = m.num_layers
    s = np.asarray(x, dtype=DTYPE)
    trace = []
    for t in range(1, L + 1):
        s = m.step(t, s)
        P = m.classify(t, s)
        h = float(entropy(P))
        trace.append(h)
        if h < threshold or t == L:
            return InferenceResult(int(argmax_low(P)), t, trace)


def evaluate_entropy(m: ModelBundle, data: Dataset, threshold: float) -> EvalMetrics:
    if threshold < 0:
        raise ConfigError(f"entropy threshold must be >= 0, got {threshold}")
    P, _ = m.all_probs(data.X)
    fire = entropy(P) < threshold
    fire[-1] = True
    T = np.argmax(fire, axis=0) + 1
    preds = argmax_low(P[T - 1, np.arange(len(T))])
    return metrics_from(preds, data.y, T, m.num_layers)


@dataclass(frozen=True)
class SweepRecord:
    alpha: float
    seed: int
    accuracy: float
    mean_exit_layer: float
    saved_layers: float
    baseline_accuracy: float


def sweep_alpha(model_cfg: BackboneConfig, base, alphas: Sequence[float], seeds: Sequence[int],
                train: Dataset, dev: Dataset, test: Dataset, log=None) -> list[SweepRecord]:
    """Full iterative training per (alpha, seed); metrics on ``test``.

    ``baseline_accuracy`` is the init-stage model evaluated at full depth.
    """
    from .training import train_iterative

    if len(alphas) == 0:
        raise ConfigError("alpha list must be non-empty")
    records = []
    for alpha in alphas:
        for seed in seeds:
            cfg = replace(base, seed=int(seed), reward=replace(base.reward, alpha=float(alpha)))
            m = ModelBundle(model_cfg, Rng(seed))
            report = train_iterative(m, train, dev, cfg, log=log)
            metrics = evaluate(m, test)
            baseline = ModelBundle(model_cfg, Rng(seed))
            baseline.load_state_dict(report.init_state)
            base_acc = evaluate_full_depth(baseline, test).accuracy
            records.append(SweepRecord(float(alpha), int(seed), metrics.accuracy,
                                       metrics.mean_exit_layer, metrics.saved_layers, base_acc))
    return records


def average_sweep(records: Sequence[SweepRecord]) -> list[dict]:
    """Seed-averaged (alpha, accuracy, saved_layers, ...) rows, in alpha order."""
    out = []
    for alpha in sorted({r.alpha for r in records}):
        rs = [r for r in records if r.alpha == alpha]
        out.append({
            "alpha": alpha,
            "accuracy": float(np.mean([r.accuracy for r in rs])),
            "mean_exit_layer": float(np.mean([r.mean_exit_layer for r in rs])),
            "saved_layers": float(np.mean([r.saved_layers for r in rs])),
            "baseline_accuracy": float(np.mean([r.baseline_accuracy for r in rs])),
            "seeds": len(rs),
        })
    return out
