"""
Tests for the exact small-lattice oracle and the inequality checks built on it.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from scipy import integrate

from app.config import OracleConfig
from app.errors import CapabilityError, DomainError
from app.models import GeneralModel, QuadratureGrid
from app.oracle import (
    check_covariance_derivatives,
    cross_check_rules,
    ferromagnet,
    griffiths_monotonicity,
    hessian_identity,
    log_partition,
    moments,
    perron_frobenius_check,
    potential_hessian,
    renormalized_potential,
    run_oracle_suite,
    scale_covariance,
    truncated_two_point,
    verify_correlation_inequality,
    verify_hessian_criterion,
)
from tests.strategies import external_fields, ferromagnetic_models


def one_site_quartic(g: float, nu: float = 0.0, h: float = 0.0):
    """Reference moments of exp(-x^2/2 - g x^4/4 - nu x^2/2 + h x) by adaptive quadrature."""
    def weight(x):
        return math.exp(-0.5 * (1.0 + nu) * x * x - 0.25 * g * x**4 + h * x)
    z, _ = integrate.quad(weight, -math.inf, math.inf, epsabs=0, epsrel=1e-13)
    first, _ = integrate.quad(lambda x: x * weight(x), -math.inf, math.inf, epsabs=0, epsrel=1e-13)
    second, _ = integrate.quad(lambda x: x * x * weight(x), -math.inf, math.inf, epsabs=0, epsrel=1e-13)
    return z, first / z, second / z


class TestMoments:

    def test_gaussian_single_site(self):
        record = moments(GeneralModel(A=np.array([[2.0]]), g=0.0))
        assert record.second[0, 0] == pytest.approx(0.5, rel=1e-10)
        assert record.fourth[0] == pytest.approx(3.0 * 0.25, rel=1e-10)

    def test_gaussian_log_partition(self):
        assert log_partition(GeneralModel(A=np.array([[2.0]]), g=0.0)) == pytest.approx(0.5 * math.log(math.pi), rel=1e-10)

    @pytest.mark.parametrize("g,nu,h", [(1.0, 0.0, 0.0), (4.0, -0.5, 0.0), (0.5, 0.3, 1.2)])
    def test_quartic_single_site(self, g, nu, h):
        z, mean, second = one_site_quartic(g, nu, h)
        record = moments(GeneralModel(A=np.eye(1), g=g, nu=nu, h=np.array([h])))
        assert record.log_z == pytest.approx(math.log(z), rel=1e-8, abs=1e-8)
        assert record.mean[0] == pytest.approx(mean, rel=1e-8, abs=1e-8)
        assert record.second[0, 0] == pytest.approx(second, rel=1e-8)

    def test_gaussian_pair_covariance(self):
        A = np.array([[2.0, -0.5], [-0.5, 2.0]])
        sigma = truncated_two_point(GeneralModel(A=A, g=0.0))
        assert np.allclose(sigma, np.linalg.inv(A), atol=1e-10)

    def test_rules_agree(self, pair_model):
        _, _, difference = cross_check_rules(pair_model)
        assert difference <= 1e-8

    def test_size_cap(self):
        with pytest.raises(CapabilityError):
            moments(GeneralModel(A=np.eye(5), g=1.0))

    def test_gate_is_recorded(self, pair_model):
        record = moments(pair_model, QuadratureGrid(nodes_per_dim=16))
        assert record.gate_change <= 1e-8
        assert record.nodes_per_dim >= 32


class TestRenormalisedPotential:

    def test_zero_at_origin(self, pair_model):
        assert renormalized_potential(pair_model, 1.0, np.zeros(2)) == pytest.approx(0.0, abs=1e-12)

    def test_representations_agree(self, pair_model):
        phi = np.array([0.4, -0.2])
        shifted = renormalized_potential(pair_model, 0.5, phi, "shifted")
        direct = renormalized_potential(pair_model, 0.5, phi, "direct")
        assert shifted == pytest.approx(direct, abs=1e-7)

    @pytest.mark.parametrize("t", [0.1, 1.0, 10.0])
    def test_hessian_identity(self, pair_model, t):
        phi = np.array([0.3, -0.7])
        numeric, _ = potential_hessian(pair_model, t, phi)
        assert np.allclose(numeric, hessian_identity(pair_model, t, phi), atol=1e-5)

    def test_site_cap(self):
        with pytest.raises(CapabilityError):
            renormalized_potential(ferromagnet(3), 1.0, np.zeros(3))


class TestInequalities:

    @settings(max_examples=10, deadline=None)
    @given(model=ferromagnetic_models(n_sites=2), h=external_fields(2))
    def test_correlation_inequality_on_random_models(self, model, h):
        check = verify_correlation_inequality(model, [h], QuadratureGrid(nodes_per_dim=32), tolerance=1e-6)
        assert check.passed, check.details

    @settings(max_examples=5, deadline=None)
    @given(model=ferromagnetic_models(n_sites=3), h=external_fields(3))
    def test_correlation_inequality_on_three_sites(self, model, h):
        check = verify_correlation_inequality(model, [h], QuadratureGrid(nodes_per_dim=32), tolerance=1e-6)
        assert check.passed, check.details

    def test_correlation_inequality_on_many_fields(self):
        rng = np.random.default_rng(2024)
        h = rng.uniform(-2.0, 2.0, size=(200, 3))
        check = verify_correlation_inequality(ferromagnet(3), h, QuadratureGrid(nodes_per_dim=32), tolerance=1e-6)
        assert check.n_checked == 200
        assert check.passed, check.details

    def test_griffiths_monotonicity(self):
        check = griffiths_monotonicity(ferromagnet(3), [-0.5, 0.0, 1.0, 3.0])
        assert check.passed
        assert check.details["positivity_slack"] > 0

    @pytest.mark.parametrize("t", [0.1, 1.0, 10.0])
    def test_hessian_criterion(self, pair_model, t):
        phis = [np.array([0.0, 0.0]), np.array([1.0, -1.0]), np.array([2.0, 0.5])]
        report = verify_hessian_criterion(pair_model, t, phis, np.random.default_rng(1))
        assert report.passed, [c.name for c in report.checks if not c.passed]

    def test_covariance_derivatives(self, pair_model):
        assert check_covariance_derivatives(pair_model.dense_A(), 2.0).passed

    def test_derivatives_need_positive_scale(self, pair_model):
        with pytest.raises(DomainError):
            check_covariance_derivatives(pair_model.dense_A(), 0.0)

    def test_scale_covariance_at_zero(self):
        assert np.array_equal(scale_covariance(np.eye(2), 0.0), np.zeros((2, 2)))

    def test_perron_frobenius_rejects_negative_entries(self):
        check = perron_frobenius_check(np.array([[1.0, -0.5], [-0.5, 1.0]]))
        assert not check.passed
        assert check.details["entries"] == -0.5

    def test_suite_passes(self):
        report = run_oracle_suite(OracleConfig(n_fields=5, n_phi=2), seed=0)
        assert report.passed, [c.name for c in report.checks if not c.passed]
        names = {c.name for c in report.checks}
        assert {"dual_rule_agreement", "hessian_identity"} <= names
