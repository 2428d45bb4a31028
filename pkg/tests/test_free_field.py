"""
Tests for free-field kernels, counterterms, gaps and bound-shape fits.
"""

import math

import numpy as np
import pytest

from app.errors import ConfigurationError, DomainError, ShapeError
from app.free_field import (
    counterterm,
    counterterm_gaps,
    counterterm_scaling,
    covariance,
    covariance_matrix,
    covariance_moments,
    eta_shape,
    fit_bound_constant,
    gamma_shape,
    mass_schedule,
    shape_sweep,
)
from app.lattice import build_lattice, laplacian_matrix


class TestMassSchedule:

    def test_infinite_scale(self):
        schedule = mass_schedule(2.0)
        assert math.isinf(schedule.t)
        assert schedule.inverse_t == 0.0
        assert schedule.m2_t == 2.0

    def test_finite_scale(self):
        assert mass_schedule(1.0, 0.5).m2_t == pytest.approx(3.0)

    @pytest.mark.parametrize("m2,t", [(0.0, None), (-1.0, 1.0), (1.0, 0.0)])
    def test_rejects_non_positive(self, m2, t):
        with pytest.raises(ConfigurationError):
            mass_schedule(m2, t)


class TestCovariance:

    def test_single_site_unit_mass(self):
        kernel = covariance(build_lattice(2, 1.0, 1.0), mass_schedule(1.0))
        assert kernel.values.ravel().tolist() == pytest.approx([1.0])

    @pytest.mark.parametrize("t", [None, 0.3])
    def test_inverts_precision(self, fine_spec, t):
        kernel = covariance(fine_spec, mass_schedule(1.5, t))
        precision = fine_spec.volume_weight * (
            laplacian_matrix(fine_spec).toarray() + kernel.schedule.m2_t * np.eye(fine_spec.n_sites)
        )
        assert np.allclose(covariance_matrix(kernel) @ precision, np.eye(fine_spec.n_sites), atol=1e-10)

    def test_l1_is_inverse_mass(self, cube_spec):
        kernel = covariance(cube_spec, mass_schedule(2.0, 1.0))
        assert covariance_moments(kernel).l1 == pytest.approx(1.0 / 3.0, rel=1e-12)

    def test_positive_and_symmetric(self, fine_spec):
        kernel = covariance(fine_spec, mass_schedule(0.5))
        assert np.all(kernel.values > 0)
        assert np.allclose(fine_spec.reflect(kernel.values), kernel.values)

    def test_values_are_read_only(self, square_spec):
        kernel = covariance(square_spec, mass_schedule(1.0))
        with pytest.raises(ValueError):
            kernel.values[0, 0] = 2.0


class TestCounterterm:

    def test_formula(self, fine_spec):
        report = counterterm(fine_spec, 0.7, 1.0)
        moments = covariance_moments(covariance(fine_spec, mass_schedule(1.0)))
        expected = -3.0 * 0.7 * moments.c_origin + 6.0 * 0.49 * moments.c3_l1
        assert report.a_eps == pytest.approx(expected, rel=1e-12)

    def test_zero_coupling(self, fine_spec):
        assert counterterm(fine_spec, 0.0, 1.0).a_eps == 0.0

    def test_rejects_negative_coupling(self, fine_spec):
        with pytest.raises(ConfigurationError):
            counterterm(fine_spec, -0.1, 1.0)

    def test_gaps_match_direct_difference(self, fine_spec):
        c_inf = covariance(fine_spec, mass_schedule(1.0)).values
        c_t = covariance(fine_spec, mass_schedule(1.0, 2.0)).values
        w = fine_spec.volume_weight
        eta, gamma = counterterm_gaps(fine_spec, 1.0, 2.0)
        assert eta == pytest.approx(c_inf[0, 0] - c_t[0, 0], rel=1e-10)
        assert gamma == pytest.approx(w * np.sum(c_inf**3 - c_t**3), rel=1e-10)

    def test_gaps_vanish_at_infinity(self, fine_spec):
        assert counterterm_gaps(fine_spec, 1.0, math.inf) == (0.0, 0.0)

    def test_gaps_decrease_in_t(self, fine_spec):
        etas = [counterterm_gaps(fine_spec, 1.0, t)[0] for t in (0.01, 0.1, 1.0, 10.0, 1e4)]
        assert all(a > b for a, b in zip(etas, etas[1:]))

    def test_gaps_stay_accurate_at_large_t(self, fine_spec):
        eta, _ = counterterm_gaps(fine_spec, 1.0, 1e12)
        assert 0.0 < eta < 1e-10

    def test_scaling_recovers_tadpole_divergence_in_d2(self):
        scaling = counterterm_scaling(2, 0.1, 1.0, 4.0, [0.5, 0.25, 0.125, 0.0625])
        assert scaling.c1 == pytest.approx(3.0 / (4.0 * math.pi), rel=0.1)
        assert scaling.c2 is None

    def test_scaling_recovers_linear_divergence_in_d3(self):
        # C(0) ~ W / eps with W the cubic-lattice Watson integral
        scaling = counterterm_scaling(3, 0.1, 1.0, 2.0, [0.5, 0.25, 0.125, 0.0625])
        assert scaling.basis == ["1", "eps^-1", "log(eps^-2)"]
        assert scaling.c1 == pytest.approx(3.0 * 0.252731, rel=0.15)
        assert scaling.c2 is not None
        assert scaling.max_abs_residual <= 0.01 * float(np.ptp(scaling.a_values))

    def test_scaling_needs_positive_coupling(self):
        with pytest.raises(DomainError):
            counterterm_scaling(2, 0.0, 1.0, 4.0, [0.5, 0.25])


class TestShapes:

    def test_eta_shape_d2(self):
        assert eta_shape(2, 1.0, 1.0) == pytest.approx(math.log(2.0))

    def test_gamma_shape_vanishes_at_infinity(self):
        assert gamma_shape(3, 1.0, math.inf) == 0.0

    def test_unsupported_dimension(self):
        with pytest.raises(DomainError):
            eta_shape(4, 1.0, 1.0)

    def test_fit_exact_multiple(self):
        shapes = [1.0, 2.0, 3.0, 4.0]
        fit = fit_bound_constant("demo", [2.0 * s for s in shapes], shapes, ["a", "a", "b", "b"])
        assert fit.constant == pytest.approx(2.0)
        assert fit.spread == pytest.approx(0.0)
        assert fit.stable

    def test_fit_rejects_value_where_shape_vanishes(self):
        with pytest.raises(DomainError):
            fit_bound_constant("demo", [1.0, 0.5], [1.0, 0.0])

    def test_fit_rejects_length_mismatch(self):
        with pytest.raises(ShapeError):
            fit_bound_constant("demo", [1.0, 2.0], [1.0])

    def test_lattice_gaps_follow_their_shapes(self):
        eta_fit, gamma_fit = shape_sweep(2, 4.0, [0.5, 0.25], 1.0, [0.1, 1.0, 10.0])
        assert eta_fit.n_points == 6
        assert 0.0 < eta_fit.constant < 1.0
        assert 0.0 < gamma_fit.constant < 1.0

    def test_shapes_stable_across_spacings(self):
        eta_fit, gamma_fit = shape_sweep(2, 4.0, [0.5, 0.25], 1.0, [1.0, 10.0, 100.0])
        for fit in (eta_fit, gamma_fit):
            assert set(fit.group_constants) == {"eps=0.5", "eps=0.25"}
            assert fit.stable, fit.group_constants
            assert fit.spread <= 0.2
