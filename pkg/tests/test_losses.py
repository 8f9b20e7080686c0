import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from statefulpp.distribution import DimensionError, MixtureDistribution, Population, ScalarPointMass
from statefulpp.losses import (
    HALF_LINE,
    Box,
    Classifier,
    LossModel,
    MinimizerConfig,
    NonConvergenceError,
    estimate_constants,
    expected_loss,
    loss_grad,
    loss_value,
    minimize,
    regularized_logistic,
    scalar_squared,
)


def central_diff(f, theta, h=1e-6):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def toy_population():
    X = np.array([[1.0, 2.0], [2.0, 1.0], [-1.0, -1.5], [-2.0, -0.5]])
    return Population.uniform(X, [1.0, 1.0, -1.0, -1.0])


class TestModels:
    def test_scalar_constants(self):
        m = scalar_squared()
        assert (m.gamma, m.beta) == (2.0, 2.0)
        with pytest.raises(ValueError):
            LossModel("scalar_squared", gamma=1.0, beta=2.0)

    def test_logistic_gamma_is_lambda(self):
        assert regularized_logistic(0.5).gamma == 0.5

    def test_classifier_projects(self):
        clf = Classifier([0.2], HALF_LINE)
        assert clf.params[0] == 1.0
        with pytest.raises(ValueError):
            Box(2.0, 1.0)


class TestLossValue:
    def test_scalar(self):
        assert loss_value(scalar_squared(), (None, 3.0), [1.0]) == 4.0

    @pytest.mark.parametrize("lam", [0.0, 0.3, 5.0])
    def test_logistic_at_zero(self, lam):
        assert loss_value(regularized_logistic(lam), ([1.5, -2.0, 1.0], -1.0), np.zeros(3)) == pytest.approx(math.log(2))

    def test_logistic_large_margin(self):
        got = loss_value(regularized_logistic(0.0), ([10.0, 1.0], 1.0), [1.0, 0.0])
        assert got == pytest.approx(math.log1p(math.exp(-10.0)), rel=1e-12)
        assert got == pytest.approx(4.54e-5, rel=1e-3)

    def test_penalty(self):
        m = regularized_logistic(2.0)
        theta = np.array([0.5, -1.0, 3.0])
        base = regularized_logistic(0.0)
        z = ([1.0, 1.0, 1.0], 1.0)
        assert loss_value(m, z, theta) - loss_value(base, z, theta) == pytest.approx(0.5 * 2.0 * theta @ theta)
        m_free = regularized_logistic(2.0, unpenalized_intercept=True)
        assert loss_value(m_free, z, theta) - loss_value(base, z, theta) == pytest.approx(1.25)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            loss_value(regularized_logistic(), ([1.0, 2.0], 1.0), np.zeros(3))


class TestGradient:
    def test_scalar(self):
        np.testing.assert_array_equal(loss_grad(scalar_squared(), (None, 3.0), [1.0]), [-4.0])

    def test_logistic_at_zero(self):
        np.testing.assert_allclose(loss_grad(regularized_logistic(0.0), ([2.0, 0.0], 1.0), np.zeros(2)), [-1.0, 0.0])

    @pytest.mark.parametrize("free", [False, True])
    def test_logistic_finite_differences(self, free):
        rng = np.random.default_rng(11)
        m = regularized_logistic(0.7, unpenalized_intercept=free)
        for _ in range(100):
            x = np.append(rng.normal(size=4), 1.0)
            y = rng.choice([-1.0, 1.0])
            theta = rng.normal(size=5)
            fd = central_diff(lambda t: loss_value(m, (x, y), t), theta)
            g = loss_grad(m, (x, y), theta)
            assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-8)

    def test_scalar_finite_differences(self):
        rng = np.random.default_rng(12)
        m = scalar_squared()
        for _ in range(100):
            y, theta = rng.uniform(1, 10, 2)
            fd = central_diff(lambda t: float(loss_value(m, (None, y), t)), np.array([theta]))
            g = loss_grad(m, (None, y), [theta]).astype(float)
            assert abs(g[0] - fd[0]) <= 1e-5 * max(abs(fd[0]), 1e-8)


class TestExpectedLoss:
    def test_scalar(self):
        m = scalar_squared()
        assert expected_loss(m, ScalarPointMass(5.0), [5.0]) == 0.0
        assert expected_loss(m, ScalarPointMass(5.0), [3.0]) == 4.0

    def test_two_points(self):
        m = regularized_logistic(0.5)
        pop = Population.uniform([[1.0, 1.0], [-2.0, 1.0]], [1.0, -1.0])
        theta = np.array([0.3, -0.2])
        a = loss_value(m, (pop.features[0], 1.0), theta)
        b = loss_value(m, (pop.features[1], -1.0), theta)
        assert expected_loss(m, pop, theta) == pytest.approx((a + b) / 2, rel=1e-14)

    def test_mixture_is_component_average(self):
        m = regularized_logistic(1.0)
        pop = toy_population()
        shifted = pop.with_features(pop.features + 0.5)
        mix = MixtureDistribution(((0.25, pop), (0.75, shifted)))
        theta = np.array([0.4, 0.1])
        expected = 0.25 * expected_loss(m, pop, theta) + 0.75 * expected_loss(m, shifted, theta)
        assert expected_loss(m, mix, theta) == pytest.approx(expected, rel=1e-14)

    def test_kind_mismatch(self):
        with pytest.raises(TypeError):
            expected_loss(scalar_squared(), toy_population(), [1.0])


class TestMinimize:
    def test_scalar_closed_form(self):
        assert float(minimize(scalar_squared(), ScalarPointMass(3.0)).params[0]) == 3.0

    def test_scalar_projects_onto_boundary(self):
        # a point mass below the domain is built from an unconstrained box here
        m = scalar_squared()
        clf = Classifier(m.domain.project(np.array([0.5])), m.domain)
        assert clf.params[0] == 1.0

    def test_logistic_matches_grid_search(self):
        m = regularized_logistic(1.0)
        pop = toy_population()
        theta = minimize(m, pop).params

        def risk(T):
            margins = pop.labels[None, None, :] * np.einsum("abk,nk->abn", T, pop.features)
            return np.mean(np.logaddexp(0, -margins), axis=2) + 0.5 * np.sum(T * T, axis=2)

        # coarse pass over [-5, 5]^2, then a 1e-3 pass around the coarse winner
        g = np.arange(-5, 5 + 1e-9, 1e-2)
        T = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1)
        i, j = np.unravel_index(np.argmin(risk(T)), T.shape[:2])
        fine = [np.arange(c - 0.02, c + 0.02 + 1e-12, 1e-3) for c in (g[i], g[j])]
        T = np.stack(np.meshgrid(*fine, indexing="ij"), axis=-1)
        i, j = np.unravel_index(np.argmin(risk(T)), T.shape[:2])
        np.testing.assert_allclose(theta, [fine[0][i], fine[1][j]], atol=2e-3)

    def test_idempotent(self):
        m = regularized_logistic(1.0)
        pop = toy_population()
        theta = minimize(m, pop)
        _, info = minimize(m, pop, warm_start=theta, full_output=True)
        assert info.steps <= 1

    def test_warm_start_invariance(self):
        m = regularized_logistic(0.5)
        pop = toy_population()
        cfg = MinimizerConfig()
        a = minimize(m, pop, cfg).params
        b = minimize(m, pop, cfg, warm_start=[10.0, -10.0]).params
        assert np.linalg.norm(a - b) <= 2 * cfg.tolerance / m.gamma

    def test_backtracking_agrees(self):
        m = regularized_logistic(1.0)
        pop = toy_population()
        a = minimize(m, pop).params
        b = minimize(m, pop, MinimizerConfig(step_rule="backtracking")).params
        np.testing.assert_allclose(a, b, atol=1e-7)

    def test_nonconvergence_carries_iterate(self):
        with pytest.raises(NonConvergenceError) as exc:
            minimize(regularized_logistic(1.0), toy_population(), MinimizerConfig(max_steps=2))
        assert exc.value.last is not None and exc.value.residual > 1e-8

    def test_deterministic(self):
        m = regularized_logistic(1.0)
        np.testing.assert_array_equal(minimize(m, toy_population()).params, minimize(m, toy_population()).params)


class TestConstants:
    def test_scalar(self):
        rep = estimate_constants(scalar_squared(), ScalarPointMass(3.0))
        assert (rep.gamma, rep.beta) == (2.0, 2.0)
        assert rep.beta_probe_max <= 2.0 + 1e-9
        assert rep.l_z <= rep.l_z_bound

    def test_logistic(self):
        rng = np.random.default_rng(4)
        X = rng.uniform(-1, 1, size=(50, 3))
        X /= np.maximum(1.0, np.linalg.norm(X, axis=1, keepdims=True) / 2.0)
        pop = Population.uniform(X, rng.choice([-1.0, 1.0], 50))
        rep = estimate_constants(regularized_logistic(1.0), pop)
        assert rep.gamma == 1.0
        assert rep.beta <= 2.0
        assert rep.beta_probe_max <= rep.beta
        assert rep.l_z <= rep.l_z_bound + 1e-12


# -- curvature definitions on random probes -------------------------------------

vec = st.lists(st.floats(-5, 5), min_size=3, max_size=3).map(np.array)


@settings(max_examples=1000, deadline=None)
@given(vec, vec, vec, st.sampled_from([-1.0, 1.0]), st.floats(0.1, 3.0))
def test_logistic_strong_convexity(theta, theta2, x, y, lam):
    m = regularized_logistic(lam)
    z = (x, y)
    lhs = loss_value(m, z, theta2)
    rhs = loss_value(m, z, theta) + loss_grad(m, z, theta) @ (theta2 - theta) + 0.5 * m.gamma * np.sum((theta2 - theta) ** 2)
    assert lhs >= rhs - 1e-9


@settings(max_examples=1000, deadline=None)
@given(st.floats(1, 50), st.floats(1, 50), st.floats(1, 50), st.floats(1, 50))
def test_scalar_curvature(theta, theta2, y, y2):
    m = scalar_squared()
    lhs = loss_value(m, (None, y), [theta2])
    rhs = loss_value(m, (None, y), [theta]) + loss_grad(m, (None, y), [theta])[0] * (theta2 - theta) \
        + 0.5 * m.gamma * (theta2 - theta) ** 2
    assert lhs >= rhs - 1e-9 * max(1.0, abs(lhs))
    g = loss_grad(m, (None, y), [theta])[0]
    assert abs(g - loss_grad(m, (None, y), [theta2])[0]) <= m.beta * abs(theta - theta2) * (1 + 1e-12)
    assert abs(g - loss_grad(m, (None, y2), [theta])[0]) <= m.beta * abs(y - y2) * (1 + 1e-12)


@settings(max_examples=1000, deadline=None)
@given(vec, vec, vec, st.sampled_from([-1.0, 1.0]))
def test_logistic_smoothness(theta, theta2, x, y):
    m = regularized_logistic(1.0)
    beta = m.lam + x @ x / 4.0
    diff = np.linalg.norm(loss_grad(m, (x, y), theta) - loss_grad(m, (x, y), theta2))
    assert diff <= beta * np.linalg.norm(theta - theta2) + 1e-9
