import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from exitlab.core import Rng, nll
from exitlab.data import Instance
from exitlab.errors import ConfigError, UsageError
from exitlab.model import BackboneConfig, ModelBundle, digest
from exitlab.rl import (HARDNESS, VANILLA, Action, RewardConfig, Step, Trajectory,
                        enumerate_expected_reward, enumerate_trajectories, exit_layer_probs,
                        exit_rewards, expected_reward, expected_reward_grad, reinforce_gradient,
                        reinforce_update, reward, sample_exit_layers, sample_trajectory,
                        trajectory_return)

HG = RewardConfig(alpha=0.02, variant=HARDNESS)
VA = RewardConfig(alpha=0.02, variant=VANILLA)


class TestReward:
    def test_hardness_guided_substitution(self):
        # -0.5 - 0.02 * (1 - 6/12) * 3
        assert reward(Action.EXIT, 3, 0.5, 6, 12, HG) == pytest.approx(-0.53, abs=1e-15)

    def test_continue_is_zero(self):
        assert reward(Action.CONTINUE, 5, 2.0, 3, 12, HG) == 0.0
        assert reward(Action.CONTINUE, 5, 2.0, 3, 12, VA) == 0.0

    def test_memorized_at_last_layer_removes_penalty(self):
        assert reward(Action.EXIT, 7, 0.25, 12, 12, HG) == -0.25

    def test_vanilla_substitution(self):
        assert reward(Action.EXIT, 3, 0.5, 6, 12, VA) == pytest.approx(-0.56, abs=1e-15)

    @pytest.mark.parametrize("args", [(0, 0.1, 1, 4), (5, 0.1, 1, 4), (2, 0.1, 0, 4),
                                      (2, 0.1, 5, 4), (2, -0.1, 1, 4)])
    def test_bounds(self, args):
        t, H, M, L = args
        with pytest.raises(UsageError):
            reward(Action.EXIT, t, H, M, L, HG)

    def test_negative_alpha(self):
        with pytest.raises(ConfigError):
            RewardConfig(alpha=-0.1)

    @given(st.integers(2, 16), st.data(), st.floats(0, 10), st.floats(0, 0.1))
    def test_nonpositive_and_monotone_in_hardness(self, L, data, H, alpha):
        t = data.draw(st.integers(1, L))
        cfg = RewardConfig(alpha=alpha)
        rs = [reward(Action.EXIT, t, H, M, L, cfg) for M in range(1, L + 1)]
        assert all(r <= 0 for r in rs)
        # the acceleration coefficient alpha * (1 - M/L) shrinks as M grows
        assert all(b >= a for a, b in zip(rs, rs[1:]))

    def test_vectorised_matches_scalar(self):
        H, T, M = np.array([0.1, 0.7, 0.0]), np.array([1, 4, 12]), np.array([3, 12, 1])
        for cfg in (HG, VA):
            expect = [reward(Action.EXIT, int(t), h, int(m), 12, cfg) for h, t, m in zip(H, T, M)]
            assert exit_rewards(H, T, M, 12, cfg).tolist() == expect


def make_model(L, seed=0, **kw):
    cfg = BackboneConfig(input_dim=3, num_classes=2, num_layers=L, hidden_dim=4, policy_hidden_dim=3, **kw)
    return ModelBundle(cfg, Rng(seed))


INST = Instance(7, np.array([0.4, -1.1, 0.6]), 1)


class TestSampling:
    def test_certain_exit_at_first_layer(self, set_exit_prob):
        m = make_model(5)
        set_exit_prob(m, 1, 1.0)
        tr = sample_trajectory(m, INST, 0.0, Rng(0).stream("s"))
        assert tr.exit_layer == 1 and len(tr.steps) == 1

    def test_never_exit_forces_last(self, set_exit_prob):
        m = make_model(5)
        for t in range(1, 6):
            set_exit_prob(m, t, 0.0)
        tr = sample_trajectory(m, INST, 0.0, Rng(0).stream("s"))
        assert tr.exit_layer == 5
        assert tr.steps[-1].forced and tr.steps[-1].action == Action.EXIT
        assert all(s.action == Action.CONTINUE for s in tr.steps[:-1])
        tr.validate(5)

    def test_records_exit_probabilities(self, set_exit_prob):
        m = make_model(3)
        set_exit_prob(m, 1, 0.0)
        set_exit_prob(m, 2, 0.25)
        tr = sample_trajectory(m, INST, 0.0, Rng(2).stream("s"))
        assert tr.steps[0].p_exit == pytest.approx(0.0, abs=1e-20)
        if len(tr.steps) > 1:
            assert tr.steps[1].p_exit == pytest.approx(0.25, abs=1e-12)

    @staticmethod
    def geometric(L):
        q = np.array([0.5 ** k for k in range(1, L)] + [0.5 ** (L - 1)])
        assert q.sum() == 1.0
        return q

    def _check_law(self, exits, q):
        n = len(exits)
        freq = np.bincount(exits, minlength=len(q) + 1)[1:] / n
        sigma = np.sqrt(q * (1 - q) / n)
        assert (np.abs(freq - q) <= 3 * sigma).all(), (freq, q)

    def test_full_exploration_is_truncated_geometric(self):
        L = 10
        E = np.full((L, 100_000), 0.93)  # policy is irrelevant under eps = 1
        exits = sample_exit_layers(E, 1.0, Rng(0).stream("geo"))
        self._check_law(exits, self.geometric(L))

    def test_sample_trajectory_full_exploration(self):
        m = make_model(6)
        gen = Rng(1).stream("geo")
        exits = np.array([sample_trajectory(m, INST, 1.0, gen).exit_layer for _ in range(20_000)])
        self._check_law(exits, self.geometric(6))

    def test_exit_law_matches_enumeration(self):
        m = make_model(4, seed=3)
        for p in m.theta:
            p.values += Rng(3).stream("perturb").normal(0, 1.0, p.shape)
        S = m.states(INST.features[None, :])
        p = [float(m.exit_prob(t, S[t - 1][0])) for t in range(1, 5)]
        q = exit_layer_probs(p)
        assert q.sum() == pytest.approx(1.0, abs=1e-15)
        E = np.repeat(np.array(p)[:, None], 200_000, axis=1)
        self._check_law(sample_exit_layers(E, 0.0, Rng(4).stream("s")), q)

    def test_bad_eps(self):
        with pytest.raises(ConfigError):
            sample_trajectory(make_model(3), INST, 1.5, Rng(0).stream("s"))


class TestReturn:
    def test_zero_loss_zero_penalty(self, set_exit_prob):
        m = make_model(3)
        set_exit_prob(m, 1, 1.0)
        clf = m.classifiers[0]
        clf.W.values[...] = 0.0
        clf.b.values[...] = [-1000.0, 1000.0]
        tr = sample_trajectory(m, INST, 0.0, Rng(0).stream("s"))
        for variant in (HARDNESS, VANILLA):
            assert trajectory_return(tr, INST, m, {7: 2}, RewardConfig(0.0, variant)) == 0.0

    def test_equals_exit_reward(self):
        m = make_model(5, seed=2)
        gen = Rng(0).stream("s")
        for _ in range(20):
            tr = sample_trajectory(m, INST, 0.5, gen)
            T = tr.exit_layer
            H = float(nll(np.array([1]), m.classify(T, tr.steps[-1].state)[None, :])[0])
            assert trajectory_return(tr, INST, m, {7: 3}, HG) == reward(Action.EXIT, T, H, 3, 5, HG)

    def test_equals_explicit_step_sum(self):
        m = make_model(4, seed=5)
        tr = sample_trajectory(m, INST, 0.7, Rng(9).stream("s"))
        total = 0.0
        for st_ in tr.steps:
            p = m.classify(st_.layer, st_.state)
            H = -np.log(p[INST.label]) if st_.action == Action.EXIT else 0.0
            total += reward(st_.action, st_.layer, H, 2, 4, VA)
        assert trajectory_return(tr, INST, m, {7: 2}, VA) == pytest.approx(total, abs=1e-15)

    def test_missing_table_entry(self):
        m = make_model(3)
        tr = sample_trajectory(m, INST, 0.0, Rng(0).stream("s"))
        with pytest.raises(UsageError):
            trajectory_return(tr, INST, m, {}, HG)


class TestEnumeration:
    def test_single_layer_is_forced(self):
        assert expected_reward([0.3], [-0.7]) == -0.7

    def test_constant_reward(self):
        assert expected_reward([0.2, 0.9, 0.4, 0.6], [-1.0] * 4) == pytest.approx(-1.0, abs=1e-15)

    def test_monte_carlo(self):
        m = make_model(3, seed=8)
        table = {7: 2}
        exact = enumerate_expected_reward(m, INST, table, HG)
        S = m.states(INST.features[None, :])
        p = np.array([float(m.exit_prob(t, S[t - 1][0])) for t in range(1, 4)])
        r = np.array([reward(Action.EXIT, t, float(nll(np.array([1]), m.classify(t, S[t - 1]))[0]), 2, 3, HG)
                      for t in range(1, 4)])
        n = 1_000_000
        exits = sample_exit_layers(np.repeat(p[:, None], n, axis=1), 0.0, Rng(5).stream("mc"))
        samples = r[exits - 1]
        assert abs(samples.mean() - exact) <= 3 * samples.std() / np.sqrt(n)

    def test_enumerated_trajectories(self):
        m = make_model(4, seed=1)
        trs = enumerate_trajectories(m, INST)
        assert sum(w for _, w in trs) == pytest.approx(1.0, abs=1e-15)
        for tr, _ in trs:
            tr.validate(4)
        J = sum(w * trajectory_return(tr, INST, m, {7: 2}, HG) for tr, w in trs)
        assert J == pytest.approx(enumerate_expected_reward(m, INST, {7: 2}, HG), abs=1e-14)


def estimator_expectation(m, inst, table, cfg, baseline=0.0):
    """Exact expectation of the REINFORCE ascent direction over every trajectory."""
    trs = enumerate_trajectories(m, inst)
    R = [trajectory_return(tr, inst, m, table, cfg) for tr, _ in trs]
    for p in m.theta:
        p.zero_grad()
    reinforce_gradient(m, [tr for tr, _ in trs], R, weights=[w for _, w in trs], baseline=baseline)
    out = [-p.grad.copy() for p in m.theta]
    for p in m.theta:
        p.zero_grad()
    return out


def finite_difference_grad(m, inst, table, cfg, h=1e-5):
    grads = []
    for p in m.theta:
        g = np.zeros_like(p.values)
        flat, gflat = p.values.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = enumerate_expected_reward(m, inst, table, cfg)
            flat[i] = orig - h
            down = enumerate_expected_reward(m, inst, table, cfg)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


class TestReinforce:
    @pytest.mark.parametrize("cfg", [HG, VA, RewardConfig(0.0)])
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_analytic_gradient_matches_finite_differences(self, cfg, seed):
        m = make_model(4, seed=seed)
        for p in m.theta:
            p.values += Rng(seed).stream("perturb").normal(0, 0.5, p.shape)
        analytic = expected_reward_grad(m, INST, {7: 2}, cfg)
        numeric = finite_difference_grad(m, INST, {7: 2}, cfg)
        for a, n in zip(analytic, numeric):
            np.testing.assert_allclose(a, n, atol=1e-8)

    @pytest.mark.parametrize("baseline", [0.0, -0.37])
    def test_estimator_expectation_equals_gradient(self, baseline):
        m = make_model(4, seed=6)
        for p in m.theta:
            p.values += Rng(6).stream("perturb").normal(0, 0.5, p.shape)
        exp_grad = estimator_expectation(m, INST, {7: 3}, HG, baseline)
        for a, b in zip(exp_grad, expected_reward_grad(m, INST, {7: 3}, HG)):
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_equal_returns_give_no_update(self):
        m = make_model(4)
        before = digest(m.parameters)
        trs = [sample_trajectory(m, INST, 0.5, Rng(0).stream("s")) for _ in range(8)]
        reinforce_update(m, trs, [-0.4] * 8, lr=1.0)
        assert digest(m.parameters) == before

    def test_update_leaves_omega_untouched(self):
        m = make_model(4)
        omega = digest(m.omega)
        theta = digest(m.theta)
        gen = Rng(0).stream("s")
        trs = [sample_trajectory(m, INST, 0.3, gen) for _ in range(16)]
        reinforce_update(m, trs, [trajectory_return(t, INST, m, {7: 2}, HG) for t in trs], lr=0.5)
        assert digest(m.omega) == omega
        assert digest(m.theta) != theta

    def test_empty_batch(self):
        with pytest.raises(UsageError):
            reinforce_update(make_model(3), [], [], lr=0.1)

    def test_rejects_malformed_trajectory(self):
        m = make_model(3)
        s = np.zeros(4)
        bad = Trajectory([Step(1, s, Action.EXIT, 0.5), Step(2, s, Action.EXIT, 0.5)])
        with pytest.raises(UsageError):
            reinforce_update(m, [bad], [-1.0], lr=0.1)

    def test_toy_bandit_converges_to_optimal_exit(self):
        rewards = [-0.1, -0.9]
        # enumeration over deterministic policies: exiting at layer 1 is optimal
        assert expected_reward([1.0, 0.0], rewards) == max(expected_reward([p, 0.0], rewards)
                                                           for p in np.linspace(0, 1, 11))
        m = make_model(2)
        gen = Rng(0).stream("bandit")
        s1 = lambda: m.states(INST.features[None, :], 1)[0][0]  # noqa: E731
        for _ in range(500):
            trs = [sample_trajectory(m, INST, 0.0, gen) for _ in range(16)]
            reinforce_update(m, trs, [rewards[t.exit_layer - 1] for t in trs], lr=1.0)
            if float(m.exit_prob(1, s1())) > 0.99:
                break
        assert float(m.exit_prob(1, s1())) > 0.99
