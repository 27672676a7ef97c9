"""Instance hardness: memorized layer, forgetting events, rank correlation,
per-layer loss/accuracy profiles."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import argmax_low, nll
from .data import Dataset, Instance
from .errors import DataError
from .model import ModelBundle


def correctness(m: ModelBundle, inst: Instance) -> np.ndarray:
    """Per-layer bits: does layer i's classifier argmax equal the label?"""
    P, _ = m.all_probs(np.asarray(inst.features)[None, :])
    return argmax_low(P[:, 0, :]) == inst.label


def correctness_matrix(m: ModelBundle, data: Dataset) -> np.ndarray:
    """Boolean (N, L) matrix, row n is the correctness vector of instance n."""
    P, _ = m.all_probs(data.X)
    return (argmax_low(P) == data.y[None, :]).T


def memorized_layer(c: Sequence[bool]) -> int:
    """Smallest k such that c_i holds for every i >= k; L if the last layer is wrong."""
    c = np.asarray(c, dtype=bool)
    L = len(c)
    if not c[-1]:
        return L
    wrong = np.flatnonzero(~c)
    return int(wrong[-1]) + 2 if len(wrong) else 1


def memorized_layers(C: np.ndarray) -> np.ndarray:
    """Row-wise :func:`memorized_layer` over an (N, L) correctness matrix."""
    C = np.asarray(C, dtype=bool)
    N, L = C.shape
    # length of the all-true suffix of each row
    suffix = np.argmin(np.concatenate([C[:, ::-1], np.zeros((N, 1), bool)], axis=1), axis=1)
    return np.where(suffix == 0, L, L - suffix + 1)


def forgetting_events(history: Sequence[bool]) -> int:
    h = np.asarray(history, dtype=bool)
    if h.size == 0:
        raise DataError("forgetting_events needs at least one observation")
    return int(np.count_nonzero(h[:-1] & ~h[1:]))


def average_ranks(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    sorted_v = v[order]
    ranks = np.empty(len(v))
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, sorted_v[1:] != sorted_v[:-1]])
    ends = np.r_[starts[1:], len(v)]
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + e + 1) / 2.0
    return ranks


def spearman(xs, ys) -> float | None:
    """Spearman's rho with average ranks for ties.

    Returns ``None`` when either argument has no rank variance (rho undefined).
    """
    xs, ys = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise DataError("spearman expects two 1-D sequences of equal length")
    if len(xs) < 2:
        raise DataError("spearman needs at least two observations")
    rx, ry = average_ranks(xs), average_ranks(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    sxx, syy = (rx * rx).sum(), (ry * ry).sum()
    if sxx == 0.0 or syy == 0.0:
        return None
    rho = (rx * ry).sum() / np.sqrt(sxx * syy)
    return float(np.clip(rho, -1.0, 1.0))


def layer_profile(m: ModelBundle, data: Dataset) -> list[tuple[float, float]]:
    """(mean cross-entropy, accuracy) of every layer's classifier over ``data``."""
    if len(data) == 0:
        raise DataError("layer_profile on an empty dataset")
    P, _ = m.all_probs(data.X)
    out = []
    for Pt in P:
        loss = nll(data.y, Pt).mean()
        acc = (argmax_low(Pt) == data.y).mean()
        out.append((float(loss), float(acc)))
    return out


def final_layer_losses(m: ModelBundle, data: Dataset) -> np.ndarray:
    P, _ = m.all_probs(data.X)
    return nll(data.y, P[-1])


def conditional_layer_accuracy(m: ModelBundle, data: Dataset, exit_layers) -> list[float | None]:
    """Accuracy of layer t over only the instances exiting at t (None when none do)."""
    exit_layers = np.asarray(exit_layers)
    P, _ = m.all_probs(data.X)
    out = []
    for t in range(1, m.num_layers + 1):
        sel = exit_layers == t
        if not sel.any():
            out.append(None)
        else:
            out.append(float((argmax_low(P[t - 1][sel]) == data.y[sel]).mean()))
    return out
