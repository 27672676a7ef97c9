"""Iterative training: weighted-CE initialisation, then rounds of
memorized-layer refresh, policy stage (theta) and task stage (omega)."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .core import Rng, nll, sgd_step, softmax, softmax_xent_grad, zero_grads
from .data import Dataset
from .errors import ConfigError, TrainingError
from .hardness import correctness_matrix, memorized_layers
from .model import EXIT, ModelBundle, save_checkpoint
from .rl import RewardConfig, exit_rewards, policy_gradient, sample_exit_layers

LogFn = Callable[[dict], None]


@dataclass(frozen=True)
class TrainConfig:
    init_epochs: int = 30
    policy_epochs: int = 4
    task_epochs: int = 2
    rounds_max: int = 10
    lr_init: float = 0.05
    lr_policy: float = 0.5
    lr_task: float = 0.02
    reward: RewardConfig = field(default_factory=RewardConfig)
    K: int = 4
    eps_schedule: tuple[float, float] = (0.3, 0.0)
    patience: int = 3
    batch_size: int = 32
    seed: int = 0

    def validate(self):
        for name in ("init_epochs", "policy_epochs", "task_epochs", "rounds_max",
                     "patience", "K", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("lr_init", "lr_policy", "lr_task"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        lo, hi = self.eps_schedule
        if not (0 <= lo <= 1 and 0 <= hi <= 1):
            raise ConfigError(f"eps_schedule values must lie in [0, 1], got {self.eps_schedule}")
        return self


@dataclass
class RoundRecord:
    round: int
    dev_accuracy: float
    dev_mean_exit_layer: float
    dev_saved_layers: float
    policy_objective: float
    task_objective: float
    memorized_histogram: list[int]


@dataclass
class TrainReport:
    rounds: list[RoundRecord] = field(default_factory=list)
    init_objective: list[float] = field(default_factory=list)
    best_round: int = 0
    best_dev_accuracy: float = float("nan")
    # final-layer correctness on the train set after every init epoch, shape (epochs, N)
    init_history: np.ndarray | None = None
    init_state: dict | None = None
    best_state: dict | None = None

    def to_records(self) -> list[dict]:
        return [asdict(r) for r in self.rounds]


def layer_weights(L: int) -> np.ndarray:
    """Deeper classifiers weigh more: w_i = i / sum_j j."""
    i = np.arange(1, L + 1, dtype=np.float64)
    return i / i.sum()


def weighted_ce(per_layer_losses) -> float:
    losses = np.asarray(per_layer_losses, dtype=np.float64)
    return float(layer_weights(len(losses)) @ losses)


def _batches(n: int, size: int, gen: np.random.Generator):
    order = gen.permutation(n)
    for s in range(0, n, size):
        yield order[s:s + size]


def _check_finite(value: float, stage: str, epoch: int):
    if not math.isfinite(value):
        raise TrainingError(f"{stage} diverged at epoch {epoch}: objective={value}")


def train_init(m: ModelBundle, data: Dataset, cfg: TrainConfig, rng: Rng | None = None):
    """Minimise the depth-weighted sum of per-layer cross-entropies over omega.

    Returns (objective per epoch, final-layer correctness history (epochs, N)).
    """
    rng = rng or Rng(cfg.seed)
    gen = rng.stream("train-init")
    L = m.num_layers
    w = layer_weights(L)
    trace, history = [], []
    for epoch in range(cfg.init_epochs):
        total = 0.0
        for idx in _batches(len(data), cfg.batch_size, gen):
            X, y = data.X[idx], data.y[idx]
            B = len(idx)
            S = m.states(X, record=True)
            dstates = {}
            for t in range(1, L + 1):
                P = softmax(m.classifier_logits(t, S[t - 1], record=True))
                total += w[t - 1] * nll(y, P).sum()
                dlogits = softmax_xent_grad(P, y, np.full(B, w[t - 1] / B))
                dstates[t] = m.classifiers[t - 1].backward(dlogits)
            m.backward_states(dstates)
            sgd_step(m.omega, cfg.lr_init)
        objective = total / len(data)
        _check_finite(objective, "init stage", epoch)
        trace.append(float(objective))
        P, _ = m.all_probs(data.X)
        history.append(np.argmax(P[-1], axis=-1) == data.y)
    m.clear()
    return trace, np.array(history)


def refresh_memorized(m: ModelBundle, data: Dataset) -> dict[int, int]:
    M = memorized_layers(correctness_matrix(m, data))
    return {int(i): int(k) for i, k in zip(data.ids, M)}


def _eps_for_epoch(cfg: TrainConfig, epoch: int) -> float:
    start, end = cfg.eps_schedule
    if cfg.policy_epochs == 1:
        return start
    return start + (end - start) * epoch / (cfg.policy_epochs - 1)


def train_policy_stage(m: ModelBundle, data: Dataset, table: dict[int, int], cfg: TrainConfig,
                       rng: Rng | None = None, round_index: int = 0) -> float:
    """REINFORCE on theta with omega frozen. Returns the mean sampled return."""
    rng = rng or Rng(cfg.seed)
    gen = rng.stream("train-policy", round_index)
    L = m.num_layers
    # omega is frozen for the whole stage, so states and losses are fixed
    S = m.states(data.X)
    P = np.stack([m.classify(t, S[t - 1]) for t in range(1, L + 1)])
    H = np.stack([nll(data.y, Pt) for Pt in P])  # (L, N)
    M = np.array([table[int(i)] for i in data.ids])
    returns_seen = []
    for epoch in range(cfg.policy_epochs):
        eps = _eps_for_epoch(cfg, epoch)
        for idx in _batches(len(data), cfg.batch_size, gen):
            rows = np.repeat(idx, cfg.K)
            states = [St[rows] for St in S]
            E = np.stack([m.exit_prob(t, states[t - 1]) for t in range(1, L + 1)])
            T = sample_exit_layers(E, eps, gen)
            R = exit_rewards(H[T - 1, rows], T, M[rows], L, cfg.reward)
            returns_seen.append(R.mean())
            adv = (R - R.mean()) / len(R)
            zero_grads(m.theta)
            policy_gradient(m, states, T, adv)
            sgd_step(m.theta, cfg.lr_policy)
        _check_finite(float(np.mean(returns_seen)), "policy stage", epoch)
    m.clear()
    return float(np.mean(returns_seen))


def task_loss_and_grad(m: ModelBundle, X, y, exit_layers) -> float:
    """Mean over rows of H(y, P_T(x)) at each row's exit layer T; accumulates omega grads.

    Only the exit-layer classifier of each row receives gradient.
    """
    L = m.num_layers
    B = len(y)
    top = int(exit_layers.max())
    S = m.states(X, upto=top, record=True)
    total = 0.0
    dstates = {}
    for t in range(1, top + 1):
        rows = np.flatnonzero(exit_layers == t)
        if len(rows) == 0:
            continue
        clf = m.classifiers[t - 1]
        P = softmax(clf.forward(S[t - 1][rows], record=True))
        total += nll(y[rows], P).sum()
        ds = np.zeros_like(S[t - 1])
        ds[rows] = clf.backward(softmax_xent_grad(P, y[rows], np.full(len(rows), 1.0 / B)))
        dstates[t] = ds
    m.backward_states(dstates)
    return total / B


def train_task_stage(m: ModelBundle, data: Dataset, cfg: TrainConfig, rng: Rng | None = None,
                     round_index: int = 0) -> float:
    """Exit-conditioned cross-entropy on omega with theta frozen. Returns mean loss."""
    rng = rng or Rng(cfg.seed)
    gen = rng.stream("train-task", round_index)
    L = m.num_layers
    losses = []
    for epoch in range(cfg.task_epochs):
        total = 0.0
        for idx in _batches(len(data), cfg.batch_size, gen):
            X, y = data.X[idx], data.y[idx]
            S = m.states(X)
            E = np.stack([m.exit_prob(t, S[t - 1]) for t in range(1, L + 1)])
            T = sample_exit_layers(E, 0.0, gen)
            zero_grads(m.omega)
            total += task_loss_and_grad(m, X, y, T) * len(idx)
            sgd_step(m.omega, cfg.lr_task)
        loss = total / len(data)
        _check_finite(loss, "task stage", epoch)
        losses.append(loss)
    m.clear()
    return float(np.mean(losses))


def train_iterative(m: ModelBundle, train: Dataset, dev: Dataset, cfg: TrainConfig,
                    log: LogFn | None = None, checkpoint_dir=None,
                    checkpoint_meta: dict | None = None) -> TrainReport:
    """Run init once, then refresh/policy/task rounds until dev accuracy stalls.

    On return ``m`` holds the best-dev-accuracy round's parameters.
    """
    from .inference import evaluate

    cfg.validate()
    rng = Rng(cfg.seed)
    log = log or (lambda rec: None)
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    report = TrainReport()
    meta = dict(checkpoint_meta or {})

    trace, history = train_init(m, train, cfg, rng)
    report.init_objective = trace
    report.init_history = history
    report.init_state = m.state_dict()
    log({"round": 0, "stage": "init", "objective": trace[-1]})
    if ckpt is not None:
        save_checkpoint(m, ckpt / "init.npz", {**meta, "round": 0})

    best_acc, stale = -1.0, 0
    for r in range(1, cfg.rounds_max + 1):
        table = refresh_memorized(m, train)
        hist = np.bincount(list(table.values()), minlength=m.num_layers + 1)[1:]
        pol = train_policy_stage(m, train, table, cfg, rng, r)
        log({"round": r, "stage": "policy", "objective": pol})
        task = train_task_stage(m, train, cfg, rng, r)
        metrics = evaluate(m, dev)
        rec = RoundRecord(r, metrics.accuracy, metrics.mean_exit_layer, metrics.saved_layers,
                          pol, task, [int(v) for v in hist])
        report.rounds.append(rec)
        log({"round": r, "stage": "task", "objective": task,
             "dev_accuracy": metrics.accuracy, "mean_exit_layer": metrics.mean_exit_layer})
        if ckpt is not None:
            save_checkpoint(m, ckpt / f"round{r}.npz", {**meta, "round": r})
        if metrics.accuracy > best_acc:
            best_acc, stale = metrics.accuracy, 0
            report.best_round = r
            report.best_state = m.state_dict()
            if ckpt is not None:
                save_checkpoint(m, ckpt / "best.npz",
                                {**meta, "round": r, "dev_accuracy": metrics.accuracy})
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    report.best_dev_accuracy = best_acc
    m.load_state_dict(report.best_state)
    return report
