import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from exitlab.core import (Dense, Parameter, ReLU, Rng, SoftmaxCrossEntropy, affine,
                          cross_entropy, finite_diff_check, relu, sgd_step, softmax)
from exitlab.errors import ConfigError, NumericError, UsageError
from exitlab.model import BackboneConfig, ModelBundle

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
# logits whose softmax entries stay representably inside (0, 1)
moderate = st.floats(-15, 15, allow_nan=False, allow_infinity=False)


def P(values):
    return Parameter(np.asarray(values, dtype=float))


class TestAffine:
    def test_identity(self):
        out = affine(P(np.eye(2)), P([0.0, 0.0]), [1.0, 2.0])
        assert out.tolist() == [1.0, 2.0]

    def test_zero_weights(self):
        out = affine(P(np.zeros((2, 5))), P([3.0, 4.0]), np.arange(5.0))
        assert out.tolist() == [3.0, 4.0]

    def test_matches_naive_loops(self):
        gen = np.random.default_rng(0)
        W, b, x = gen.normal(size=(3, 2)), gen.normal(size=3), gen.normal(size=2)
        naive = [b[i] + sum(W[i, j] * x[j] for j in range(2)) for i in range(3)]
        np.testing.assert_allclose(affine(P(W), P(b), x), naive, rtol=0, atol=1e-14)

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigError):
            affine(P(np.eye(2)), P([0.0, 0.0]), [1.0, 2.0, 3.0])
        with pytest.raises(ConfigError):
            affine(P(np.eye(2)), P([0.0]), [1.0, 2.0])


class TestRelu:
    def test_sign_cases(self):
        assert relu([-1.0, 0.0, 2.0]).tolist() == [0.0, 0.0, 2.0]

    def test_all_negative(self):
        assert not relu(-np.arange(1.0, 6.0)).any()

    def test_positive_unchanged(self):
        x = np.array([0.5, 3.0, 7.25])
        assert relu(x).tolist() == x.tolist()

    def test_subgradient_at_zero_is_zero(self):
        r = ReLU()
        r.forward(np.array([0.0, 1.0]), record=True)
        assert r.backward(np.ones(2)).tolist() == [0.0, 1.0]


class TestSoftmax:
    def test_symmetric(self):
        assert softmax([0.0, 0.0]).tolist() == [0.5, 0.5]

    def test_ln2(self):
        np.testing.assert_allclose(softmax([math.log(2), 0.0]), [2 / 3, 1 / 3], atol=1e-15)

    def test_large_logit_no_overflow(self):
        out = softmax([1000.0, 0.0])
        mpmath.mp.dps = 50
        hi = 1 / (1 + mpmath.e ** -1000)
        assert np.isfinite(out).all()
        assert abs(out[0] - float(hi)) < 1e-15
        assert abs(out[1] - float(1 - hi)) < 1e-300

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            softmax([np.nan, 0.0])

    def test_needs_two_logits(self):
        with pytest.raises(ConfigError):
            softmax([1.0])

    @given(arrays(float, st.integers(2, 8), elements=moderate), finite)
    def test_probability_vector_and_shift_invariance(self, z, c):
        p = softmax(z)
        assert ((p > 0) & (p < 1)).all()
        assert abs(p.sum() - 1.0) < 1e-9
        np.testing.assert_allclose(softmax(z + c), p, atol=1e-9)


class TestCrossEntropy:
    def test_perfect(self):
        assert cross_entropy([1, 0], [1.0, 0.0]) == 0.0

    def test_half(self):
        assert cross_entropy([1, 0], [0.5, 0.5]) == pytest.approx(0.693147, abs=1e-6)

    def test_three_quarters(self):
        assert cross_entropy([0, 1], [0.25, 0.75]) == pytest.approx(0.287682, abs=1e-6)

    def test_zero_probability_is_clamped(self):
        v = cross_entropy([0, 1], [1.0, 0.0])
        assert np.isfinite(v) and v == pytest.approx(-math.log(1e-12))

    @given(arrays(float, st.integers(2, 6), elements=finite), st.data())
    def test_nonnegative(self, z, data):
        p = softmax(z)
        k = data.draw(st.integers(0, len(z) - 1))
        y = np.eye(len(z))[k]
        h = cross_entropy(y, p)
        assert h >= 0
        if p[k] == 1.0:
            assert h == 0.0


class TestBackward:
    def test_backward_without_forward(self):
        with pytest.raises(UsageError):
            Dense(2, 2, np.random.default_rng(0)).backward(np.ones(2))
        with pytest.raises(UsageError):
            ReLU().backward(np.ones(2))
        with pytest.raises(UsageError):
            SoftmaxCrossEntropy().backward()

    def test_constant_loss_gives_zero_grads(self):
        d = Dense(3, 2, np.random.default_rng(0))
        d.forward(np.ones(3), record=True)
        d.backward(np.zeros(2))
        assert not d.W.grad.any() and not d.b.grad.any()

    def test_linear_loss_grad_equals_input(self):
        d = Dense(3, 1, np.random.default_rng(0))
        x = np.array([0.3, -1.2, 2.0])
        d.forward(x, record=True)
        d.backward(np.array([1.0]))
        assert d.W.grad[0].tolist() == x.tolist()

    def test_two_layer_net_matches_finite_differences(self):
        gen = np.random.default_rng(4)
        l1, act, l2, loss = Dense(4, 6, gen), ReLU(), Dense(6, 3, gen), SoftmaxCrossEntropy()
        X, y = gen.normal(size=(5, 4)), gen.integers(0, 3, size=5)

        def f():
            v = loss.forward(l2.forward(act.forward(l1.forward(X, True), True), True), y)
            l1.backward(act.backward(l2.backward(loss.backward())))
            return v

        assert finite_diff_check(f, l1.params + l2.params, 1e-5) < 1e-4


class TestSgd:
    def test_single_step(self):
        p = Parameter(np.array([1.0]))
        p.grad[:] = 2.0
        sgd_step([p], 0.1)
        assert p.values[0] == pytest.approx(0.8, abs=1e-15)
        assert p.grad[0] == 0.0

    def test_zero_grad_no_change(self):
        p = Parameter(np.array([1.5, -2.0]))
        sgd_step([p], 0.3)
        assert p.values.tolist() == [1.5, -2.0]

    def test_rejects_nonpositive_lr(self):
        with pytest.raises(ConfigError):
            sgd_step([P([1.0])], 0.0)

    def test_quadratic_descent_is_monotone(self):
        # f(w) = 0.5 * w.A.w, closed-form gradient A.w; lr below 2/lambda_max
        A = np.diag([1.0, 4.0, 9.0])
        p = Parameter(np.array([1.0, -2.0, 0.5]))
        losses = []
        for _ in range(50):
            losses.append(0.5 * p.values @ A @ p.values)
            p.grad[:] = A @ p.values
            sgd_step([p], 0.1)
        assert all(b < a for a, b in zip(losses, losses[1:]))


class TestFiniteDiff:
    def test_constant_function(self):
        p = P([1.0, 2.0])
        assert finite_diff_check(lambda: 3.0, [p], 1e-4) == 0.0

    def test_linear_function_is_exact(self):
        p = P([0.5, -1.5, 2.0])
        c = np.array([1.0, 2.0, -3.0])

        def f():
            p.grad += c
            return float(c @ p.values)

        assert finite_diff_check(f, [p], 1e-4) < 1e-10

    def test_step_bounds(self):
        with pytest.raises(ConfigError):
            finite_diff_check(lambda: 0.0, [], 1e-2)

    def test_random_backbone_and_heads(self):
        from exitlab.gradcheck import check_model
        assert check_model(123) < 1e-4


class TestRng:
    def test_same_seed_same_stream(self):
        a, b = Rng(5).stream("init").random(10), Rng(5).stream("init").random(10)
        assert a.tobytes() == b.tobytes()

    def test_purposes_differ(self):
        assert Rng(5).stream("init").random(4).tobytes() != Rng(5).stream("data").random(4).tobytes()

    def test_bad_seed(self):
        with pytest.raises(ConfigError):
            Rng(-1)

    def test_identical_initialisation(self):
        cfg = BackboneConfig(input_dim=4, num_classes=2, num_layers=3)
        a, b = ModelBundle(cfg, Rng(9)), ModelBundle(cfg, Rng(9))
        for pa, pb in zip(a.parameters, b.parameters):
            assert pa.values.tobytes() == pb.values.tobytes()


def test_glorot_bounds():
    d = Dense(30, 20, Rng(0).stream("init"))
    assert np.abs(d.W.values).max() <= math.sqrt(6 / 50)


@settings(max_examples=20, deadline=None, derandomize=True)
@given(st.integers(0, 2**32))
def test_gradcheck_property(seed):
    from exitlab.gradcheck import check_model
    assert check_model(seed) < 1e-4
