from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from statefulpp.data import generate_synthetic
from statefulpp.distribution import MixtureDistribution, Population, ScalarPointMass, StatePoint, w1, w1_aligned
from statefulpp.transitions import (
    GeometricDecay,
    KGroups,
    ScalarLinear,
    StrategicResponse,
    estimate_joint_sensitivity,
    generate_probes,
    geometric_decay,
    k_groups,
    scalar_linear,
    strategic_response,
)


@pytest.fixture
def baseline():
    return generate_synthetic(30, 3, seed=5)


def grid_best_response(x, theta, eps, S, resolution=1e-3, half_width=None):
    """Maximize -<theta, x'> - ||x' - x||^2 / (2 eps) coordinate-wise over S by grid search."""
    out = np.array(x, dtype=float)
    for i in S:
        hw = half_width or (abs(eps * theta[i]) + 1.0)
        grid = x[i] + np.arange(-hw, hw + resolution / 2, resolution)
        util = -theta[i] * grid - (grid - x[i]) ** 2 / (2 * eps)
        out[i] = grid[np.argmax(util)]
    return out


class TestStrategicResponse:
    def test_zero_epsilon_is_baseline(self, baseline):
        spec = StrategicResponse(baseline, [0], 0.0)
        np.testing.assert_array_equal(spec.response(np.ones(4)).features, baseline.features)

    def test_zero_theta_is_baseline(self, baseline):
        spec = StrategicResponse(baseline, [0, 1], 3.0)
        np.testing.assert_array_equal(spec.response(np.zeros(4)).features, baseline.features)

    def test_worked_row(self):
        pop = Population.uniform([[2.0, 3.0]], [1.0])
        out = strategic_response(StrategicResponse(pop, [0], 2.0, intercept=False), [0.5, -1.0])
        np.testing.assert_array_equal(out.features, [[1.0, 3.0]])
        np.testing.assert_allclose(grid_best_response(np.array([2.0, 3.0]), np.array([0.5, -1.0]), 2.0, [0]),
                                   [1.0, 3.0], atol=1e-3)

    def test_labels_weights_untouched(self, baseline):
        out = StrategicResponse(baseline, [0, 2], 1.5).response([1.0, -2.0, 0.5, 3.0])
        np.testing.assert_array_equal(out.labels, baseline.labels)
        np.testing.assert_array_equal(out.weights, baseline.weights)
        np.testing.assert_array_equal(out.features[:, [1, 3]], baseline.features[:, [1, 3]])

    def test_ignores_state(self, baseline):
        spec = StrategicResponse(baseline, [0], 1.0)
        other = baseline.with_features(baseline.features + 4.0)
        assert w1_aligned(spec(baseline, np.ones(4)), spec(other, np.ones(4))) == 0.0

    def test_intercept_not_strategic(self, baseline):
        with pytest.raises(ValueError):
            StrategicResponse(baseline, [3], 1.0)

    def test_empty_set_with_positive_epsilon(self, baseline):
        with pytest.raises(ValueError):
            StrategicResponse(baseline, [], 1.0)


class TestGeometricDecay:
    def test_delta_one_is_fresh_response(self, baseline):
        spec = StrategicResponse(baseline, [0], 1.0)
        theta = np.array([0.5, 0.2, -0.1, 0.3])
        out = geometric_decay(spec, 1.0)(baseline, theta)
        assert len(out.components) == 1
        np.testing.assert_array_equal(out.components[0][1].features, spec.response(theta).features)

    def test_delta_zero_keeps_state(self, baseline):
        spec = StrategicResponse(baseline, [0], 1.0)
        out = GeometricDecay(spec, 0.0)(baseline, np.ones(4))
        assert w1(out, baseline) == 0.0

    def test_delta_point_seven(self, baseline):
        spec = StrategicResponse(baseline, [0, 1], 2.0)
        theta = np.array([0.5, -0.5, 0.0, 0.0])
        out = GeometricDecay(spec, 0.7)(baseline, theta)
        np.testing.assert_allclose(out.weights, [0.3, 0.7], rtol=1e-15)
        # every individual moves by eps * ||theta_S|| in the fresh component
        assert w1(out, baseline) == pytest.approx(0.7 * 2.0 * np.sqrt(0.5), rel=1e-12)

    def test_telescoping_weights(self, baseline):
        delta, T = 0.3, 8
        tr = GeometricDecay(StrategicResponse(baseline, [0], 1.0), delta)
        d = baseline
        for t in range(T):
            d = tr(d, np.full(4, 0.1 * t))
        expected = [(1 - delta) ** T] + [delta * (1 - delta) ** (T - 1 - s) for s in range(T)]
        np.testing.assert_allclose(d.weights, expected, rtol=1e-12)

    def test_rejects_bad_delta(self, baseline):
        with pytest.raises(ValueError):
            GeometricDecay(StrategicResponse(baseline, [0], 1.0), 1.2)


class TestKGroups:
    def test_k_one_matches_stateless(self, baseline):
        spec = StrategicResponse(baseline, [0, 1], 1.0)
        tr = k_groups(spec, 1)
        rng = np.random.default_rng(0)
        for _ in range(4):
            theta = rng.normal(size=4)
            assert w1(tr(baseline, theta), spec.response(theta)) == 0.0

    def test_constant_classifier(self, baseline):
        spec = StrategicResponse(baseline, [0, 1], 1.5)
        tr = KGroups(spec, 3, seed=2)
        theta = np.array([1.0, -1.0, 0.5, 0.0])
        for _ in range(3):
            out = tr(baseline, theta)
        assert w1_aligned(out, spec.response(theta)) == pytest.approx(0.0, abs=1e-15)

    def test_k_two_lags_one_round(self, baseline):
        spec = StrategicResponse(baseline, [0], 1.0)
        tr = KGroups(spec, 2, seed=1)
        a, b = np.array([1.0, 0, 0, 0]), np.array([-2.0, 0, 0, 0])
        tr(baseline, a)
        out = tr(baseline, b)
        g1, g2 = tr.groups
        np.testing.assert_array_equal(out.components[0][1].features, spec.response(b).features[g1])
        np.testing.assert_array_equal(out.components[1][1].features, spec.response(a).features[g2])

    def test_first_round_padded(self, baseline):
        spec = StrategicResponse(baseline, [0], 1.0)
        theta = np.array([0.7, 0, 0, 0])
        out = KGroups(spec, 4)(baseline, theta)
        assert w1_aligned(out, spec.response(theta)) == pytest.approx(0.0, abs=1e-15)

    def test_mass_conservation(self, baseline):
        tr = KGroups(StrategicResponse(baseline, [0], 1.0), 4, seed=9)
        rng = np.random.default_rng(9)
        for _ in range(6):
            out = tr(baseline, rng.normal(size=4))
            np.testing.assert_allclose(out.weights, tr.shares, rtol=1e-15)
        assert sorted(np.concatenate(tr.groups).tolist()) == list(range(baseline.n))

    def test_partition_is_seeded(self, baseline):
        spec = StrategicResponse(baseline, [0], 1.0)
        np.testing.assert_array_equal(KGroups(spec, 3, seed=4).group_of, KGroups(spec, 3, seed=4).group_of)


class TestScalarLinear:
    @pytest.mark.parametrize("eps,d,theta,expected", [(0.0, 7.0, 3.0, 1.0), (0.25, 2.0, 2.0, 2.0), (0.5, 1.0, 1.0, 2.0)])
    def test_examples(self, eps, d, theta, expected):
        assert scalar_linear(eps)(ScalarPointMass(d), [theta]).value == expected

    def test_exact_arithmetic(self):
        out = ScalarLinear(0.25)(ScalarPointMass(Fraction(4, 3)), [0.5])
        assert out.value == Fraction(1) + Fraction(1, 3) + Fraction(1, 8)


class TestSensitivity:
    def test_scalar_attains_epsilon(self):
        rng = np.random.default_rng(0)
        states = [StatePoint(ScalarPointMass(Fraction(v)), [u]) for v, u in rng.uniform(1, 5, (10, 2))]
        probes = generate_probes(states, 1000, scale=0.5, seed=1, aligned=50)
        assert all(s2.dist.exact for _, s2 in probes)
        est = estimate_joint_sensitivity(ScalarLinear(0.3), probes)
        assert 0.3 - 1e-12 <= est.epsilon_hat <= 0.3

    def test_gdr_theta_only_probes(self, baseline):
        eps, delta = 2.0, 0.6
        spec = StrategicResponse(baseline, [0, 1], eps)
        tr = GeometricDecay(spec, delta)
        rng = np.random.default_rng(3)
        probes = []
        for _ in range(50):
            th, th2 = rng.normal(size=4), rng.normal(size=4)
            probes.append((StatePoint(baseline, th), StatePoint(baseline, th2)))
        est = estimate_joint_sensitivity(tr, probes)
        s, s2 = est.argmax
        bound = delta * eps * np.linalg.norm(s.theta[:2] - s2.theta[:2]) / np.linalg.norm(s.theta - s2.theta)
        assert est.epsilon_hat <= bound + 1e-12

    def test_degenerate_probes(self):
        s = StatePoint(ScalarPointMass(2.0), [2.0])
        with pytest.raises(ValueError):
            estimate_joint_sensitivity(ScalarLinear(0.3), [(s, s)])

    def test_rejects_stateful(self, baseline):
        with pytest.raises(ValueError):
            estimate_joint_sensitivity(KGroups(StrategicResponse(baseline, [0], 1.0), 2), [])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.001, 5.0))
def test_best_response_matches_grid(seed, eps):
    rng = np.random.default_rng(seed)
    x = np.append(rng.normal(size=3), 1.0)
    theta = rng.normal(size=4)
    pop = Population.uniform(x[None, :], [1.0])
    closed = StrategicResponse(pop, [0, 2], eps).response(theta).features[0]
    np.testing.assert_allclose(closed, grid_best_response(x, theta, eps, [0, 2]), atol=2e-3)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_maps_are_deterministic(seed):
    rng = np.random.default_rng(seed)
    base = generate_synthetic(10, 2, seed=seed)
    theta = rng.normal(size=3)
    spec = StrategicResponse(base, [0], float(rng.uniform(0, 3)))
    mix = MixtureDistribution(((0.4, base), (0.6, spec.response(-theta))))
    for tr in (spec, GeometricDecay(spec, 0.5)):
        assert w1(tr(mix, theta), tr(mix, theta)) == 0.0
    a, b = KGroups(spec, 2, seed=seed), KGroups(spec, 2, seed=seed)
    assert w1(a(mix, theta), b(mix, theta)) == 0.0
