import math

import numpy as np
import pytest
from helpers import make_bundle
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from riskcem import (
    CostWeights,
    UncertaintyReport,
    aleatoric_entropy,
    aleatoric_variance,
    epistemic_disagreement,
    uncertainty_costs,
    uncertainty_report,
)
from riskcem.envs import AdditiveGaussianDynamics, GroundTruthEnsemble
from riskcem.errors import InvalidInputError

GAUSS_ENTROPY = 0.5 * math.log(2 * math.pi * math.e)

positive = st.floats(1e-4, 1e3)


class TestAleatoric:
    def test_constant_variance(self):
        np.testing.assert_allclose(aleatoric_variance(make_bundle(np.full((4, 6, 2), 0.04))), 0.04, rtol=1e-12)

    def test_mean_over_particles(self):
        var = np.array([[[0.01], [0.09]]])
        assert aleatoric_variance(make_bundle(var))[0, 0] == pytest.approx(0.05, abs=1e-15)

    def test_doubling(self):
        var = np.random.default_rng(0).uniform(0.1, 2, (3, 4, 2))
        np.testing.assert_allclose(aleatoric_variance(make_bundle(2 * var)), 2 * aleatoric_variance(make_bundle(var)), rtol=1e-12)

    def test_unit_entropy(self):
        h = aleatoric_entropy(make_bundle(np.ones((3, 4, 1))))
        np.testing.assert_allclose(h, GAUSS_ENTROPY, atol=1e-12)
        assert h[0] == pytest.approx(1.41894, abs=1e-5)

    def test_entropy_additive_in_dims(self):
        np.testing.assert_allclose(aleatoric_entropy(make_bundle(np.ones((2, 4, 5)))), 5 * GAUSS_ENTROPY, atol=1e-12)

    def test_scaling_by_e_squared_adds_one_per_dim(self):
        var = np.random.default_rng(1).uniform(0.1, 2, (3, 4, 3))
        diff = aleatoric_entropy(make_bundle(var * math.e**2)) - aleatoric_entropy(make_bundle(var))
        np.testing.assert_allclose(diff, 3.0, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(arrays(float, (2, 3, 2), elements=positive), st.integers(0, 1), st.integers(0, 2), st.integers(0, 1), st.floats(1.01, 10))
    def test_entropy_strictly_increasing_in_each_variance(self, var, t, b, d, factor):
        bigger = var.copy()
        bigger[t, b, d] *= factor
        assert aleatoric_entropy(make_bundle(bigger))[t] > aleatoric_entropy(make_bundle(var))[t]


class TestEpistemic:
    def test_identical_members(self):
        means = np.tile(np.array([[[0.3, -1.0]]]), (4, 5, 1))
        np.testing.assert_array_equal(epistemic_disagreement(make_bundle(np.ones((4, 5, 2)), means)), 0.0)

    def test_two_members_population_variance(self):
        means = np.array([[[0.0], [2.0]]])
        assert epistemic_disagreement(make_bundle(np.ones((1, 2, 1)), means))[0, 0] == pytest.approx(1.0, abs=1e-15)

    def test_scaling_about_average(self):
        rng = np.random.default_rng(2)
        means = rng.normal(size=(3, 5, 2))
        avg = means.mean(axis=1, keepdims=True)
        base = epistemic_disagreement(make_bundle(np.ones((3, 5, 2)), means))
        wide = epistemic_disagreement(make_bundle(np.ones((3, 5, 2)), avg + 2 * (means - avg)))
        np.testing.assert_allclose(wide, 4 * base, rtol=1e-12)

    # a coarse grid keeps every disagreement far above underflow
    @settings(max_examples=50, deadline=None)
    @given(arrays(float, (2, 3, 2), elements=st.integers(-8, 8).map(lambda i: i / 4)),
           arrays(float, (2, 3, 2), elements=st.sampled_from([0.25, 0.5, 1.0, 2.0])))
    def test_nonnegative_and_zero_iff_agreement(self, means, var):
        e = epistemic_disagreement(make_bundle(np.ones((2, 3, 2)), means, var))
        assert np.all(e >= 0)
        agree = np.all(means == means[:, :1], axis=1) & np.all(var == var[:, :1], axis=1)
        np.testing.assert_array_equal(e == 0, agree)

    def test_separation_on_known_gaussian_system(self):
        sigma0 = 0.1
        dyn = AdditiveGaussianDynamics(lambda x, u: x + u, 1, 1, noise_std=sigma0)
        bundle = GroundTruthEnsemble(dyn, 5).propagate(np.zeros(1), np.full((6, 1), 0.5), 20, np.random.default_rng(0))
        np.testing.assert_array_equal(epistemic_disagreement(bundle), 0.0)
        np.testing.assert_allclose(aleatoric_variance(bundle), sigma0**2, rtol=1e-12)


class TestCosts:
    def report(self, var_a=0.04, var_e=1.0, h=3, d=1):
        return UncertaintyReport(
            aleatoric_var=np.full((h, d), var_a),
            aleatoric_entropy=np.full(h, 0.0),
            epistemic_var=np.full((h, d), var_e),
        )

    def test_penalty_sums_standard_deviations(self):
        penalty, _ = uncertainty_costs(self.report(0.04, h=3), CostWeights(aleatoric=2))
        assert penalty == pytest.approx(1.2, abs=1e-12)

    def test_zero_epistemic_weight(self):
        _, bonus = uncertainty_costs(self.report(var_e=123.0), CostWeights(epistemic=0))
        assert bonus == 0

    def test_bonus(self):
        _, bonus = uncertainty_costs(self.report(var_e=1.0, h=5), CostWeights(epistemic=0.05))
        assert bonus == pytest.approx(-0.25, abs=1e-12)

    def test_entropy_measure(self):
        bundle = make_bundle(np.ones((3, 2, 1)))
        penalty, _ = uncertainty_costs(uncertainty_report(bundle), CostWeights(aleatoric=1), "entropy")
        assert penalty == pytest.approx(3 * GAUSS_ENTROPY, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(arrays(float, (3, 2), elements=st.floats(0, 10)), arrays(float, (3, 2), elements=st.floats(0, 10)),
           st.integers(0, 2), st.integers(0, 1), st.floats(0, 5))
    def test_monotone(self, var_a, var_e, t, d, extra):
        w = CostWeights(aleatoric=0.7, epistemic=0.3)
        rep = UncertaintyReport(var_a, np.zeros(3), var_e)
        p0, b0 = uncertainty_costs(rep, w)
        var_a2, var_e2 = var_a.copy(), var_e.copy()
        var_a2[t, d] += extra
        var_e2[t, d] += extra
        p1, b1 = uncertainty_costs(UncertaintyReport(var_a2, np.zeros(3), var_e2), w)
        assert p1 >= p0
        assert b1 <= b0

    def test_negative_weight_rejected(self):
        with pytest.raises(InvalidInputError):
            uncertainty_costs(self.report(), CostWeights(aleatoric=-1))
