"""Finite-difference verification of every trainable path in the model."""
from __future__ import annotations

import numpy as np

from .core import Rng, finite_diff_check, nll, softmax, softmax_xent_grad
from .model import CONTINUE, EXIT, BackboneConfig, ModelBundle
from .training import layer_weights

SMALL = BackboneConfig(input_dim=3, num_classes=3, num_layers=3, hidden_dim=4, policy_hidden_dim=3)


def full_objective(m: ModelBundle, X, y, exit_layers) -> float:
    """Weighted per-layer CE + exit-layer CE + policy negative log-likelihood.

    Unlike training, the policy term here backpropagates into the backbone too,
    so one check covers embed, blocks, classifiers and policy heads.
    Accumulates into every parameter's grad and returns the scalar objective.
    """
    L = m.num_layers
    B = len(y)
    w = layer_weights(L)
    S = m.states(X, record=True)
    total = 0.0
    dstates = {}
    for t in range(1, L + 1):
        s = S[t - 1]
        # both classifier terms share one recorded forward of the head
        P = softmax(m.classifier_logits(t, s, record=True))
        at_exit = (exit_layers == t).astype(float)
        coef = w[t - 1] / B + at_exit / B
        total += float((coef * nll(y, P)).sum())
        ds = m.classifiers[t - 1].backward(softmax_xent_grad(P, y, coef))

        reached = (exit_layers >= t) & (t < L)
        if reached.any():
            pi = softmax(m.policy_logits(t, s, record=True))
            act = np.where(exit_layers == t, EXIT, CONTINUE)
            coef_pol = reached / B
            total -= float((coef_pol * np.log(pi[np.arange(B), act])).sum())
            dlog = pi.copy()
            dlog[np.arange(B), act] -= 1.0
            ds = ds + m.policies[t - 1].backward(dlog * coef_pol[:, None])
        dstates[t] = ds
    m.backward_states(dstates)
    return total


def check_model(seed: int, config: BackboneConfig = SMALL, batch: int = 4, h: float = 1e-5) -> float:
    rng = Rng(seed)
    m = ModelBundle(config, rng)
    gen = rng.stream("gradcheck")
    # move every policy head away from its init so log-probabilities are not all alike
    for p in m.theta:
        p.values += gen.normal(0.0, 0.3, size=p.values.shape)
    X = gen.normal(size=(batch, config.input_dim))
    y = gen.integers(0, config.num_classes, size=batch)
    T = gen.integers(1, config.num_layers + 1, size=batch)
    return finite_diff_check(lambda: full_objective(m, X, y, T), m.parameters, h)


def run_suite(seeds: int = 20, h: float = 1e-5) -> list[float]:
    return [check_model(s, h=h) for s in range(seeds)]
