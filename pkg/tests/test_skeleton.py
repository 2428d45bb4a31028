"""
Tests for the skeleton-bound engine: diagram norms, constants, the skeleton
bounds on sampled data, the small-scale window and the L^1 bound polynomial.
"""

import math

import numpy as np
import pytest

from app.config import ConstantsConfig
from app.criterion import lsi_lower_bound
from app.errors import ConfigurationError, DomainError, ShapeError
from app.free_field import covariance, covariance_moments, mass_schedule
from app.lattice import build_lattice, convolve
from app.models import ChainConfig, CorrelationEstimate, Phi4Params
from app.services.sampling_service import sampling_service
from app.skeleton import (
    BoundConstants,
    MomentInputs,
    bfs_bounds,
    chi_profile,
    continuum_bubble5_constant,
    continuum_c2_constant,
    continuum_c3_constant,
    diagram_norms,
    e_bound_l1linf,
    gaussian_profile,
    log_grid,
    mc_head,
    moment_inputs,
    profile_table,
    read_profile_csv,
    skeleton_head,
    skeleton_profile,
    small_scale_window,
    susceptibility_bound_polynomial,
    taken_out_term,
    verify_bfs,
)
from app.utils import table_to_csv


def exact_estimate(spec, s, stderr_scale=1e-6):
    """A noiseless estimate carrying S itself."""
    w = spec.volume_weight
    return CorrelationEstimate(
        spec=spec,
        s_hat=s,
        stderr=np.full(spec.shape, stderr_scale),
        chi_hat=float(w * s.sum()),
        chi_stderr=stderr_scale,
        ess=1e6,
        volume_weight=w,
    )


class TestGrid:

    def test_end_points(self):
        grid = log_grid(1e-2, 1e2, 5)
        assert grid[0] == pytest.approx(1e-2)
        assert grid[-1] == pytest.approx(1e2)
        assert grid.size == 21

    def test_rejects_reversed_range(self):
        with pytest.raises(ConfigurationError):
            log_grid(10.0, 1.0)


class TestDiagramNorms:

    def test_psi_has_zero_mass(self, fine_spec):
        norms = diagram_norms(covariance(fine_spec, mass_schedule(1.0, 0.5)))
        assert abs(norms.psi_mass) <= 1e-10 * norms.moments.c3_l1
        assert norms.psi_l1 <= 2.0 * norms.moments.c3_l1 + 1e-12

    def test_bubble_chain_identity(self, fine_spec):
        kernel = covariance(fine_spec, mass_schedule(1.0))
        c = kernel.values
        norms = diagram_norms(kernel)
        direct = fine_spec.volume_weight * np.sum(c * convolve(c, c, fine_spec))
        assert norms.c_c_c == pytest.approx(direct, rel=1e-12)

    def test_psi_transform_only_in_d3(self, fine_spec, cube_spec):
        assert diagram_norms(covariance(fine_spec, mass_schedule(1.0))).psi_hat_max is None
        assert diagram_norms(covariance(cube_spec, mass_schedule(1.0))).psi_hat_max is not None


class TestConstants:

    def test_bubble_constants(self):
        assert continuum_c2_constant(2) == pytest.approx(1.0 / (4.0 * math.pi), rel=1e-8)
        assert continuum_c2_constant(3) == pytest.approx(1.0 / (8.0 * math.pi), rel=1e-8)

    def test_lattice_approaches_continuum_c2(self):
        spec = build_lattice(2, 0.125, 8.0)
        lattice = covariance_moments(covariance(spec, mass_schedule(1.0))).l2_sq
        assert lattice == pytest.approx(continuum_c2_constant(2), rel=0.05)

    def test_positive_integrals(self):
        assert continuum_c3_constant() > 0
        assert continuum_bubble5_constant(2) > 0
        assert continuum_bubble5_constant(3) > 0

    def test_resolve_provenance(self):
        constants = BoundConstants.resolve(2)
        assert constants.c_c2.provenance == "continuum-integral"
        assert constants.c_psi_l1.value == pytest.approx(2.0 * constants.c_c3.value)

    def test_user_override(self):
        constants = BoundConstants.resolve(2, ConstantsConfig(c_c2=0.5))
        assert constants.c_c2.value == 0.5
        assert constants.c_c2.provenance == "user"

    def test_unsupported_dimension(self):
        with pytest.raises(ConfigurationError):
            BoundConstants.resolve(4)


class TestMomentInputs:

    def test_lattice_inputs(self, fine_spec):
        m = MomentInputs.from_kernel(covariance(fine_spec, mass_schedule(1.0, 1.0)))
        assert m.l1 == pytest.approx(0.5)
        assert m.provenance == "lattice-exact"

    def test_shape_inputs(self):
        m = moment_inputs(2, 1.0, 1.0, constants=ConstantsConfig(moment_source="shape"))
        assert m.l1 == pytest.approx(0.5)
        assert m.eta == pytest.approx(math.log(2.0) / (4.0 * math.pi))
        assert m.provenance == "fitted-c"

    def test_taken_out_term(self, fine_spec):
        m = MomentInputs.from_kernel(covariance(fine_spec, mass_schedule(1.0, 1.0)))
        assert taken_out_term(m) == pytest.approx(3.0 * m.eta * (m.l2_sq + m.l1**2))

    def test_lattice_dimension_must_match(self, fine_spec):
        with pytest.raises(ConfigurationError):
            moment_inputs(3, 1.0, 1.0, spec=fine_spec)


class TestSkeletonBounds:

    def test_free_field_resolvent_identity(self, fine_spec):
        """At lambda = 0, S - C = -(mu - m^2) C * S exactly and both bounds coincide."""
        c = covariance(fine_spec, mass_schedule(1.0, 2.0)).values
        s = covariance(fine_spec, mass_schedule(1.8, 2.0)).values
        lower, upper = bfs_bounds(s, c, 0.0, 0.8, fine_spec)
        assert np.allclose(lower, upper)
        assert np.allclose(upper, s - c, atol=1e-12)

    def test_lower_below_upper(self, fine_spec):
        c = covariance(fine_spec, mass_schedule(1.0)).values
        lower, upper = bfs_bounds(c, c, 0.5, 0.1, fine_spec)
        assert np.all(lower <= upper + 1e-14)

    def test_verify_on_exact_free_field(self, fine_spec):
        params = Phi4Params(spec=fine_spec, lambda_=0.0, mu=2.0, m2=1.0, t=3.0)
        kernel = covariance(fine_spec, mass_schedule(1.0, 3.0))
        s = covariance(fine_spec, mass_schedule(2.0, 3.0)).values
        report = verify_bfs(exact_estimate(fine_spec, s), kernel, params)
        assert report.violations == 0
        assert report.sign_check

    def test_verify_detects_wrong_two_point(self, fine_spec):
        params = Phi4Params(spec=fine_spec, lambda_=0.0, mu=2.0, m2=1.0)
        kernel = covariance(fine_spec, mass_schedule(1.0))
        report = verify_bfs(exact_estimate(fine_spec, kernel.values), kernel, params)
        assert report.violations > 0

    def test_verify_rejects_kernel_at_other_scale(self, fine_spec):
        params = Phi4Params(spec=fine_spec, lambda_=0.0, mu=1.0, m2=1.0, t=3.0)
        kernel = covariance(fine_spec, mass_schedule(1.0))
        with pytest.raises(ConfigurationError):
            verify_bfs(exact_estimate(fine_spec, kernel.values), kernel, params)

    def test_verify_rejects_other_lattice(self, fine_spec, square_spec):
        params = Phi4Params(spec=square_spec, lambda_=0.0, mu=1.0, m2=1.0)
        kernel = covariance(fine_spec, mass_schedule(1.0))
        with pytest.raises(ShapeError):
            verify_bfs(exact_estimate(fine_spec, kernel.values), kernel, params)

    @pytest.mark.slow
    @pytest.mark.parametrize("eps", [1.0, 0.5])
    @pytest.mark.parametrize("lambda_", [0.1, 0.5])
    def test_bounds_hold_on_sampled_chains(self, eps, lambda_):
        spec = build_lattice(2, eps, 2.0)
        params = Phi4Params(spec=spec, lambda_=lambda_, mu=1.0, m2=1.0)
        chain = ChainConfig(n_burn=1000, n_keep=20000, n_chains=4, n_batches=20, seed=23)
        stream = sampling_service.run_chain(params, chain)
        estimate = sampling_service.estimate_two_point(stream)
        report = verify_bfs(estimate, covariance(spec, mass_schedule(1.0)), params)
        assert report.violations == 0
        assert report.sign_check


class TestRecursion:

    def test_vanishes_for_free_field(self):
        m = moment_inputs(2, 1.0, 1.0, constants=ConstantsConfig(moment_source="shape"))
        assert e_bound_l1linf(0.3, 0.0, 1.0, m) == 0.0

    def test_monotone_in_trial(self):
        m = moment_inputs(2, 1.0, 1.0, constants=ConstantsConfig(moment_source="shape"))
        values = [e_bound_l1linf(x, 0.2, 1.3, m) for x in (0.0, 0.1, 0.5, 1.0)]
        assert all(a <= b for a, b in zip(values, values[1:]))

    def test_rejects_negative_trial(self):
        m = moment_inputs(2, 1.0, 1.0, constants=ConstantsConfig(moment_source="shape"))
        with pytest.raises(DomainError):
            e_bound_l1linf(-0.1, 0.2, 1.0, m)

    def test_free_window_covers_all_scales(self):
        window = small_scale_window(2, 0.0, 1.0, 1.0)
        assert math.isinf(window.t0)
        assert not window.empty

    def test_window_shrinks_with_coupling(self):
        weak = small_scale_window(2, 1e-3, 1.0, 1.0)
        strong = small_scale_window(2, 0.5, 1.0, 1.0)
        assert not weak.empty
        assert strong.empty or weak.t0 >= strong.t0
        assert weak.c0_assumption_ok

    def test_user_c0(self):
        window = small_scale_window(2, 1e-3, 1.0, 1.0, constants=ConstantsConfig(c0=1e-9))
        assert window.c0.provenance == "user"
        assert not window.c0_assumption_ok

    def test_polynomial_free_field(self):
        poly = susceptibility_bound_polynomial(1.0, 2, 0.0, 1.0, 1.0, 0.0)
        assert poly.available
        assert poly.value == 0.0

    def test_polynomial_grows_with_coupling(self):
        values = [susceptibility_bound_polynomial(1.0, 2, lam, 1.0, 1.0, 2.0 * lam).value for lam in (1e-3, 1e-2, 5e-2)]
        assert 0.0 < values[0] < values[1] < values[2]

    def test_polynomial_unavailable_at_strong_coupling(self):
        poly = susceptibility_bound_polynomial(100.0, 2, 50.0, 1.0, 1.0, 100.0)
        assert not poly.available
        assert math.isinf(poly.value)
        assert poly.reason

    def test_polynomial_on_lattice(self, fine_spec):
        poly = susceptibility_bound_polynomial(1.0, 2, 1e-2, 1.0, 1.0, 0.02, spec=fine_spec)
        assert poly.available
        assert all(tag == "explicit" for _, _, tag in poly.coefficients)

    def test_polynomial_from_shapes_is_fitted(self):
        poly = susceptibility_bound_polynomial(
            1.0, 2, 1e-2, 1.0, 1.0, 0.02, constants=ConstantsConfig(moment_source="shape"),
        )
        assert poly.available
        assert 0 in [k for k, _, _ in poly.coefficients]
        assert all(tag == "fitted-c" for _, _, tag in poly.coefficients)


class TestProfiles:

    def test_gaussian(self):
        profile = gaussian_profile([0.5, 1.0, 2.0], 1.0)
        assert profile.chi_values == pytest.approx([1.0 / 3.0, 0.5, 2.0 / 3.0])
        assert profile.tail_rule.kind == "gaussian"
        assert profile.chi_infinity == 1.0

    def test_free_skeleton_profile_is_gaussian(self):
        grid = log_grid(1e-2, 1e2, 2)
        profile = skeleton_profile(grid, 2, 0.0, 1.0, 1.0)
        assert profile.chi_values == pytest.approx((1.0 / (1.0 + 1.0 / grid)).tolist())
        assert profile.tail_rule.kind == "cap"
        assert profile.tail_rule.chi_cap == pytest.approx(1.0)
        assert profile.head_rule.bounds == (0.0, 0.0)
        assert lsi_lower_bound(profile).gamma_lower == pytest.approx(1.0, rel=1e-4)

    def test_registry(self):
        profile = chi_profile("gaussian", [1.0, 2.0], m2=2.0)
        assert profile.chi_values[0] == pytest.approx(1.0 / 3.0)

    def test_unknown_source(self):
        with pytest.raises(ConfigurationError, match="available"):
            chi_profile("oracle", [1.0])

    def test_empty_grid(self):
        with pytest.raises(ConfigurationError):
            chi_profile("gaussian", [], m2=1.0)

    def test_profile_file_reads_back(self, tmp_path):
        profile = gaussian_profile([0.1, 1.0, 10.0], 2.0)
        rows, columns = profile_table(profile)
        path = tmp_path / "chi_profile.csv"
        path.write_bytes(table_to_csv(rows, columns))
        loaded = read_profile_csv(str(path), 2.0, chi_cap=0.5)
        assert loaded.chi_values == pytest.approx(profile.chi_values, rel=1e-15)
        assert loaded.provenance == profile.provenance
        assert loaded.tail_rule.chi_cap == 0.5
        assert loaded.head_rule.kind == "gaussian"

    def test_profile_file_head(self, tmp_path):
        path = tmp_path / "chi_profile.csv"
        path.write_text("t,chi\n0.1,0.1\n1.0,0.6\n", encoding="utf-8")
        assert read_profile_csv(str(path), 1.0).head_rule.kind == "none"
        head = read_profile_csv(str(path), 1.0, head_excess=0.02).head_rule
        assert head.method == "user"
        assert head.bounds == (0.02, 0.02)


class TestHeadRules:

    SHAPES = ConstantsConfig(moment_source="shape")

    def test_weak_coupling_head(self):
        window = small_scale_window(2, 1e-3, 1.0, 1.0, constants=self.SHAPES)
        head = skeleton_head(1e-3, window, constants=self.SHAPES)
        lower, upper = head.bounds
        assert head.method == "quadrature"
        assert 0.0 < lower <= upper < 1e-3

    def test_head_outside_window(self):
        window = small_scale_window(2, 1e-3, 1.0, 1.0, constants=self.SHAPES).model_copy(update={"t0": 1e-4})
        assert skeleton_head(1e-3, window, constants=self.SHAPES).kind == "none"

    def test_sampled_head_unit_spacing(self, plaquette_spec):
        params = Phi4Params(spec=plaquette_spec, lambda_=0.5, mu=2.0, m2=2.0, normalisation="lattice_section3")
        head = mc_head(0.1, params)
        assert head.method == "closed_form"
        assert head.bounds == pytest.approx((math.log1p(0.2),) * 2)

    def test_sampled_head_in_field(self, plaquette_spec):
        params = Phi4Params(spec=plaquette_spec, lambda_=0.5, mu=1.0, h=np.ones(4))
        assert mc_head(0.1, params).kind == "none"
