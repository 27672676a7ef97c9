"""Exit/continue decision process: rewards, trajectory sampling, REINFORCE.

A trajectory walks layers 1..T choosing Continue until it chooses Exit at T.
At layer L the Exit action is forced, so that step carries no policy gradient.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import DTYPE, nll, sgd_step, softmax, zero_grads
from .data import Instance
from .errors import ConfigError, UsageError
from .model import CONTINUE, EXIT, ModelBundle


class Action(enum.IntEnum):
    EXIT = EXIT
    CONTINUE = CONTINUE


VANILLA = "vanilla"
HARDNESS = "hardness"


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 0.01
    variant: str = HARDNESS

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.variant not in (VANILLA, HARDNESS):
            raise ConfigError(f"reward variant must be {VANILLA!r} or {HARDNESS!r}, got {self.variant!r}")


def reward(a: Action, t: int, H: float, M: int, L: int, cfg: RewardConfig) -> float:
    if not 1 <= t <= L:
        raise UsageError(f"layer {t} outside [1, {L}]")
    if not 1 <= M <= L:
        raise UsageError(f"memorized layer {M} outside [1, {L}]")
    if not H >= 0:
        raise UsageError(f"loss must be non-negative, got {H}")
    if a == Action.CONTINUE:
        return 0.0
    if cfg.variant == VANILLA:
        return -H - cfg.alpha * t
    return -H - cfg.alpha * (1.0 - M / L) * t


def exit_rewards(H, T, M, L: int, cfg: RewardConfig) -> np.ndarray:
    """Vectorised Exit reward for arrays of losses, exit layers and memorized layers."""
    H, T, M = (np.asarray(v, dtype=DTYPE) for v in (H, T, M))
    if cfg.variant == VANILLA:
        return -H - cfg.alpha * T
    return -H - cfg.alpha * (1.0 - M / L) * T


@dataclass
class Step:
    layer: int
    state: np.ndarray
    action: Action
    p_exit: float
    forced: bool = False


@dataclass
class Trajectory:
    steps: list[Step] = field(default_factory=list)

    @property
    def exit_layer(self) -> int:
        return self.steps[-1].layer

    def validate(self, L: int):
        if not self.steps:
            raise UsageError("empty trajectory")
        layers = [s.layer for s in self.steps]
        if layers != list(range(1, len(layers) + 1)) or len(layers) > L:
            raise UsageError(f"trajectory layers must run 1..T with T <= {L}, got {layers}")
        if self.steps[-1].action != Action.EXIT:
            raise UsageError("trajectory must end with Exit")
        if any(s.action != Action.CONTINUE for s in self.steps[:-1]):
            raise UsageError("only the last step may Exit")


def _choose_exit(gen: np.random.Generator, p_exit, eps: float):
    """Exit decision(s): with prob. eps a fair coin, else a draw from the policy.

    Always consumes the same three uniforms per decision, keeping streams aligned.
    """
    u = gen.random((3,) + np.shape(p_exit))
    return np.where(u[0] < eps, u[1] < 0.5, u[2] < p_exit)


def sample_trajectory(m: ModelBundle, inst: Instance, eps: float,
                      gen: np.random.Generator) -> Trajectory:
    if not 0.0 <= eps <= 1.0:
        raise ConfigError(f"eps must lie in [0, 1], got {eps}")
    L = m.num_layers
    tr = Trajectory()
    s = np.asarray(inst.features, dtype=DTYPE)
    for t in range(1, L + 1):
        s = m.step(t, s)
        p = float(m.exit_prob(t, s))
        if t == L:
            tr.steps.append(Step(t, s, Action.EXIT, p, forced=True))
            break
        if _choose_exit(gen, p, eps):
            tr.steps.append(Step(t, s, Action.EXIT, p))
            break
        tr.steps.append(Step(t, s, Action.CONTINUE, p))
    return tr


def sample_exit_layers(E: np.ndarray, eps: float, gen: np.random.Generator) -> np.ndarray:
    """Exit layers (1-based) for a batch, given exit probabilities E of shape (L, N)."""
    L, N = E.shape
    decide = _choose_exit(gen, E[:-1], eps)
    decide = np.concatenate([decide, np.ones((1, N), bool)])
    return np.argmax(decide, axis=0) + 1


def trajectory_return(tr: Trajectory, inst: Instance, m: ModelBundle,
                      table: Mapping[int, int] | None, cfg: RewardConfig) -> float:
    L = m.num_layers
    if cfg.variant == HARDNESS:
        if table is None or inst.id not in table:
            raise UsageError(f"instance {inst.id} has no memorized layer in the table")
        M = int(table[inst.id])
    else:
        M = L if table is None else int(table.get(inst.id, L))
    total = 0.0
    for st in tr.steps:
        H = 0.0
        if st.action == Action.EXIT:
            P = m.classify(st.layer, st.state)
            H = float(nll(np.array([inst.label]), P[None, :])[0])
        total += reward(st.action, st.layer, H, M, L, cfg)
    return total


# --------------------------------------------------------------------------
# policy gradient
# --------------------------------------------------------------------------

def policy_gradient(m: ModelBundle, states: Sequence[np.ndarray], exit_layers: np.ndarray,
                    weights: np.ndarray):
    """Accumulate into theta.grad the gradient of -sum_n w_n sum_t log pi(a_nt | s_nt).

    ``states[t-1]`` holds s_t for every row (rows that never reach t are ignored).
    The forced Exit at layer L contributes nothing. No gradient reaches the backbone.
    """
    L = m.num_layers
    exit_layers = np.asarray(exit_layers)
    weights = np.asarray(weights, dtype=DTYPE)
    for t in range(1, L):
        rows = np.flatnonzero(exit_layers >= t)
        if len(rows) == 0:
            break
        s = states[t - 1][rows]
        head = m.policies[t - 1]
        pi = softmax(head.forward(s, record=True))
        target = np.zeros_like(pi)
        target[:, EXIT] = exit_layers[rows] == t
        target[:, CONTINUE] = 1.0 - target[:, EXIT]
        head.backward(-weights[rows, None] * (target - pi))


def _stack_trajectories(trajectories: Sequence[Trajectory], L: int):
    n = len(trajectories)
    dim = trajectories[0].steps[0].state.shape[-1]
    states = [np.zeros((n, dim)) for _ in range(L)]
    T = np.empty(n, dtype=np.int64)
    for i, tr in enumerate(trajectories):
        tr.validate(L)
        T[i] = tr.exit_layer
        for st in tr.steps:
            states[st.layer - 1][i] = st.state
    return states, T


def reinforce_gradient(m: ModelBundle, trajectories: Sequence[Trajectory], returns,
                       weights=None, baseline: float | None = None):
    """Accumulate the REINFORCE loss gradient into theta.grad.

    The loss is -sum_i w_i (R_i - b) sum_t log pi(a_t|s_t); by default w_i = 1/n
    and b is the batch-mean return. Descending the loss ascends expected reward.
    """
    if len(trajectories) == 0:
        raise UsageError("REINFORCE update on an empty batch")
    R = np.asarray(returns, dtype=DTYPE)
    if len(R) != len(trajectories):
        raise UsageError("one return per trajectory is required")
    w = np.full(len(R), 1.0 / len(R)) if weights is None else np.asarray(weights, dtype=DTYPE)
    b = R.mean() if baseline is None else baseline
    states, T = _stack_trajectories(trajectories, m.num_layers)
    policy_gradient(m, states, T, w * (R - b))


def reinforce_update(m: ModelBundle, trajectories: Sequence[Trajectory], returns, lr: float):
    """One ascent step on theta with the mean-baseline REINFORCE estimator."""
    zero_grads(m.theta)
    reinforce_gradient(m, trajectories, returns)
    sgd_step(m.theta, lr)


# --------------------------------------------------------------------------
# exact enumeration (test oracle)
# --------------------------------------------------------------------------

def exit_layer_probs(p_exit: Sequence[float]) -> np.ndarray:
    """Pr(exit at T) for T = 1..L, with the forced exit at L."""
    p = np.asarray(p_exit, dtype=DTYPE)
    L = len(p)
    reach = np.concatenate([[1.0], np.cumprod(1.0 - p[:-1])])
    q = reach * p
    q[L - 1] = reach[L - 1]
    return q


def expected_reward(p_exit, rewards) -> float:
    return float(exit_layer_probs(p_exit) @ np.asarray(rewards, dtype=DTYPE))


def _instance_terms(m: ModelBundle, inst: Instance, table, cfg: RewardConfig):
    L = m.num_layers
    S = m.states(np.asarray(inst.features)[None, :])
    p = np.array([float(m.exit_prob(t, S[t - 1][0])) for t in range(1, L + 1)])
    H = np.array([float(nll(np.array([inst.label]), m.classify(t, S[t - 1]))[0])
                  for t in range(1, L + 1)])
    if cfg.variant == HARDNESS:
        if table is None or inst.id not in table:
            raise UsageError(f"instance {inst.id} has no memorized layer in the table")
        M = int(table[inst.id])
    else:
        M = L
    r = np.array([reward(Action.EXIT, t, H[t - 1], M, L, cfg) for t in range(1, L + 1)])
    return S, p, r


def enumerate_expected_reward(m: ModelBundle, inst: Instance, table, cfg: RewardConfig) -> float:
    if m.num_layers > 16:
        raise UsageError("exact enumeration is limited to L <= 16")
    _, p, r = _instance_terms(m, inst, table, cfg)
    return expected_reward(p, r)


def expected_reward_grad(m: ModelBundle, inst: Instance, table, cfg: RewardConfig) -> list[np.ndarray]:
    """Analytic gradient of :func:`enumerate_expected_reward` w.r.t. theta.

    With V_t the expected reward given layer t is reached (V_L = r_L),
    dJ/dp_t = Pr(reach t) * (r_t - V_{t+1}); then dp/dlogit_exit = p(1 - p).
    Returned arrays align with ``m.theta``; theta.grad is left zeroed.
    """
    S, p, r = _instance_terms(m, inst, table, cfg)
    L = m.num_layers
    V = np.empty(L)
    V[-1] = r[-1]
    for t in range(L - 2, -1, -1):
        V[t] = p[t] * r[t] + (1 - p[t]) * V[t + 1]
    reach = np.concatenate([[1.0], np.cumprod(1.0 - p[:-1])])
    zero_grads(m.theta)
    for t in range(L - 1):
        dJ_dp = reach[t] * (r[t] - V[t + 1])
        dp = p[t] * (1 - p[t])
        dlogits = np.zeros((1, 2))
        dlogits[0, EXIT] = dJ_dp * dp
        dlogits[0, CONTINUE] = -dJ_dp * dp
        head = m.policies[t]
        head.forward(S[t], record=True)
        head.backward(dlogits)
    grads = [p_.grad.copy() for p_ in m.theta]
    zero_grads(m.theta)
    return grads


def enumerate_trajectories(m: ModelBundle, inst: Instance) -> list[tuple[Trajectory, float]]:
    """Every possible trajectory for ``inst`` with its exact probability under eps = 0."""
    L = m.num_layers
    S = m.states(np.asarray(inst.features)[None, :])
    p = [float(m.exit_prob(t, S[t - 1][0])) for t in range(1, L + 1)]
    q = exit_layer_probs(p)
    out = []
    for T in range(1, L + 1):
        steps = [Step(t, S[t - 1][0], Action.CONTINUE, p[t - 1]) for t in range(1, T)]
        steps.append(Step(T, S[T - 1][0], Action.EXIT, p[T - 1], forced=(T == L)))
        out.append((Trajectory(steps), float(q[T - 1])))
    return out
