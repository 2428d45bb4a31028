"""
Tests for the criterion integral, its head and tail rules, the closed-form
lattice bound and the spectral-gap upper bound.
"""

import math

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.integrate import quad

from app.errors import DomainError
from app.criterion import (
    TRUNCATION_RTOL,
    brascamp_lieb_chi_bound,
    brascamp_lieb_head,
    kappa_dot,
    kappa_path,
    lattice_phi4_bound,
    lattice_phi4_profile,
    lsi_lower_bound,
    quadrature_head,
    spectral_gap_upper,
    trial_dirichlet_form,
)
from app.models import ChainConfig, HeadRule, Phi4Params, SusceptibilityProfile, TailRule
from app.services.sampling_service import sampling_service
from app.skeleton import gaussian_profile, log_grid


GRID = log_grid(1e-4, 1e4, 20)


def capped_profile(chi: float, grid=GRID, stderr=None) -> SusceptibilityProfile:
    """Gaussian chi_t at m2 = 1/chi, also below the grid, capped at chi beyond it."""
    return SusceptibilityProfile(
        t_grid=list(grid),
        chi_values=[1.0 / (1.0 / chi + 1.0 / t) for t in grid],
        provenance=["input"] * len(grid),
        stderr=stderr,
        m2=1.0 / chi,
        head_rule=HeadRule(kind="gaussian"),
        tail_rule=TailRule(kind="cap", chi_cap=chi),
    )


def excess_profile(grid, excess, head: HeadRule, tail: TailRule) -> SusceptibilityProfile:
    """chi_s = chi^G_s + excess(s) at m2 = 1."""
    return SusceptibilityProfile(
        t_grid=list(grid),
        chi_values=[1.0 / (1.0 + 1.0 / t) + excess(t) for t in grid],
        provenance=["input"] * len(grid),
        m2=1.0,
        head_rule=head,
        tail_rule=tail,
    )


def sqrt_excess(s):
    return 0.5 * s**1.5


def damped_excess(s):
    return 0.5 * s**1.5 / (1.0 + s) ** 2


def damped_excess_integral(t):
    """int_0^t damped_excess(s)/s^2 ds, substituting s = u^2."""
    u = math.sqrt(t)
    return 0.5 * (u / (1.0 + t) + math.atan(u))


class TestKappa:

    def test_kappa_dot(self):
        assert kappa_dot(2.0, 1.0) == pytest.approx(0.25)

    def test_kappa_dot_needs_positive_t(self):
        with pytest.raises(DomainError):
            kappa_dot(0.0, 1.0)

    def test_gaussian_path_is_closed_form(self):
        t, kappa = kappa_path(gaussian_profile(GRID, 2.0))
        assert np.allclose(kappa, np.log(2.0 * t + 1.0), atol=1e-12)

    def test_path_needs_every_point(self):
        profile = SusceptibilityProfile(
            t_grid=[1.0, 2.0], chi_values=[0.5, None], provenance=["input", "input"], m2=1.0
        )
        with pytest.raises(DomainError):
            kappa_path(profile)

    def test_path_needs_head_rule(self):
        profile = excess_profile(GRID, sqrt_excess, HeadRule(), TailRule(kind="gaussian"))
        with pytest.raises(DomainError):
            kappa_path(profile)


class TestLowerBound:

    @pytest.mark.parametrize("m2", [1.0, 2.0, 4.0, 0.25])
    def test_gaussian_profile_recovers_mass(self, m2):
        report = lsi_lower_bound(gaussian_profile(GRID, m2))
        assert report.gamma_lower == pytest.approx(m2, rel=1e-8)
        assert report.gamma_upper == pytest.approx(m2)
        assert report.profile_digest == gaussian_profile(GRID, m2).digest()

    def test_gaussian_bound_independent_of_grid(self):
        coarse = lsi_lower_bound(gaussian_profile(log_grid(1e-1, 1e1, 3), 1.0))
        assert coarse.gamma_lower == pytest.approx(1.0, rel=1e-8)

    def test_linear_growth_has_no_bound(self):
        grid = [0.5, 1.0, 2.0, 4.0]
        profile = SusceptibilityProfile(
            t_grid=grid, chi_values=[2.0 * t for t in grid], provenance=["input"] * len(grid), m2=1.0
        )
        report = lsi_lower_bound(profile)
        assert report.gamma_lower is None
        assert report.diagnostics["divergence_decade"] == -1
        assert report.diagnostics["reason"] == "no tail rule beyond the grid"

    def test_missing_point(self):
        values = [1.0 / (1.0 + 1.0 / t) for t in GRID]
        values[5] = None
        profile = SusceptibilityProfile(
            t_grid=list(GRID), chi_values=values, provenance=["input"] * GRID.size, m2=1.0,
            tail_rule=TailRule(kind="gaussian"),
        )
        report = lsi_lower_bound(profile)
        assert report.gamma_lower is None
        assert report.diagnostics["first_missing_t"] == pytest.approx(GRID[5])

    def test_larger_susceptibility_smaller_bound(self):
        low = lsi_lower_bound(capped_profile(1.0)).gamma_lower
        high = lsi_lower_bound(capped_profile(2.0)).gamma_lower
        assert high < low

    def test_conservative_below_estimate(self):
        report = lsi_lower_bound(capped_profile(1.0, stderr=[0.01 * min(1.0 / (1.0 + 1.0 / t), 1.0) for t in GRID]))
        assert report.gamma_lower_conservative is not None
        assert report.gamma_lower_conservative < report.gamma_lower

    def test_huge_cap_is_reported_as_divergent(self):
        report = lsi_lower_bound(capped_profile(1e6, grid=log_grid(1e-2, 1.0, 10)))
        assert report.gamma_lower is None
        assert report.diagnostics["reason"] == "criterion integral diverges"

    def test_gaussian_head_has_no_truncation(self):
        report = lsi_lower_bound(gaussian_profile(GRID, 1.0))
        assert report.diagnostics["head_rule"] == "gaussian"
        assert report.diagnostics["truncation_error"] == pytest.approx(0.0, abs=1e-15)
        assert 0 < report.diagnostics["head_fraction"] < 1e-3
        assert 0 < report.diagnostics["tail_fraction"] < 1e-3

    def test_no_head_rule_has_no_bound(self):
        profile = excess_profile(GRID, sqrt_excess, HeadRule(), TailRule(kind="gaussian"))
        report = lsi_lower_bound(profile)
        assert report.gamma_lower is None
        assert report.diagnostics["reason"] == "no head rule below the grid"


class TestHeadRule:

    def test_quadrature_brackets_power_law(self):
        # D(t0) = sqrt(t0) for an excess of s^{3/2}/2
        head = quadrature_head(sqrt_excess, 1e-2, 1.0)
        lower, upper = head.bounds
        assert head.kind == "excess"
        assert head.method == "quadrature"
        assert lower <= 0.1 <= upper
        assert upper - lower < 2e-3

    def test_quadrature_zero_excess(self):
        head = quadrature_head(lambda s: 0.0, 1e-3, 1.0)
        assert head.bounds == (0.0, 0.0)

    @pytest.mark.parametrize("excess", [lambda s: s, lambda s: -s**2, lambda s: None])
    def test_quadrature_refuses_uncontrolled_excess(self, excess):
        # flat in log s, negative, unavailable
        assert quadrature_head(excess, 1e-3, 1.0).kind == "none"

    def test_brascamp_lieb_closed_form(self):
        head = brascamp_lieb_head(0.5, 1.0, 0.25)
        assert head.bounds == pytest.approx((math.log(1.25 / 1.125),) * 2)
        assert head.outer_integral == pytest.approx(0.25 / 1.125)

    def test_brascamp_lieb_out_of_range(self):
        assert brascamp_lieb_head(0.5, 1.0, 1.0).kind == "none"

    def test_excess_head_needs_value(self):
        with pytest.raises(ValidationError):
            HeadRule(kind="excess")
        with pytest.raises(ValidationError):
            HeadRule(kind="excess", excess_integral=0.1, excess_integral_lower=0.2)

    def test_coarse_head_is_refused(self):
        # the first-point guess excess/t would give D(t0) = 0.05 here
        grid = log_grid(1e-2, 1e2, 20)
        profile = excess_profile(
            grid, sqrt_excess, quadrature_head(sqrt_excess, grid[0], 1.0),
            TailRule(kind="cap", chi_cap=1.0 / (1.0 + 1.0 / grid[-1]) + sqrt_excess(grid[-1])),
        )
        report = lsi_lower_bound(profile)
        lower, upper = report.diagnostics["head_excess"]
        assert lower <= math.sqrt(grid[0]) <= upper
        assert report.diagnostics["truncation_error"] > TRUNCATION_RTOL
        assert report.gamma_lower is None
        assert report.diagnostics["reason"] == "head truncation error above tolerance"

    def test_fine_head_matches_closed_form(self):
        grid = log_grid(1e-10, 1e4, 20)
        profile = excess_profile(
            grid, damped_excess, quadrature_head(damped_excess, grid[0], 1.0), TailRule(kind="gaussian")
        )
        report = lsi_lower_bound(profile)
        exact = sum(
            quad(lambda t: math.exp(2.0 * damped_excess_integral(t)) / (1.0 + t) ** 2, a, b, limit=200)[0]
            for a, b in [(0.0, 1.0), (1.0, 1e2), (1e2, math.inf)]
        )
        assert report.gamma_lower is not None
        assert report.diagnostics["truncation_error"] <= TRUNCATION_RTOL
        assert report.kappa_integral == pytest.approx(exact, rel=1e-2)


class TestLatticeBound:

    def test_closed_form_at_zero_mass(self):
        assert lattice_phi4_bound(0.0, 0.0, 1.0) == pytest.approx(math.e**2 + math.e**4)

    @pytest.mark.parametrize("nu,chi", [(0.0, 1.0), (0.5, 0.8), (-0.4, 2.0)])
    def test_profile_respects_closed_form(self, nu, chi):
        profile = lattice_phi4_profile(nu, chi, log_grid(1e-3, 1e3, 20))
        integral = lsi_lower_bound(profile).kappa_integral
        assert integral is not None
        assert integral <= lattice_phi4_bound(1.0, nu, chi)

    def test_unit_mass_profile_integral(self):
        # kappa vanishes up to t = 1 and equals log t + 1/t - 1 beyond
        profile = lattice_phi4_profile(0.0, 1.0, log_grid(1e-4, 1e4, 40))
        expected = 1.0 + (math.e**2 - 1.0) / 2.0
        assert lsi_lower_bound(profile).kappa_integral == pytest.approx(expected, rel=1e-3)

    def test_brascamp_lieb_range(self):
        assert brascamp_lieb_chi_bound(0.5, 0.0) == pytest.approx(0.5)
        with pytest.raises(DomainError):
            brascamp_lieb_chi_bound(1.0, 0.5)

    def test_rejects_negative_coupling(self):
        with pytest.raises(DomainError):
            lattice_phi4_bound(-1.0, 0.0, 1.0)


class TestSpectralGap:

    def test_inverse_susceptibility(self):
        report = spectral_gap_upper(2.0, 0.1)
        assert report.gamma_upper == 0.5
        assert report.dirichlet_form == 1.0
        assert report.var_f is None

    def test_rejects_non_positive(self):
        with pytest.raises(DomainError):
            spectral_gap_upper(0.0)

    def test_trial_form_is_normalised(self, fine_spec, cube_spec):
        assert trial_dirichlet_form(fine_spec) == pytest.approx(1.0)
        assert trial_dirichlet_form(cube_spec) == pytest.approx(1.0)

    def test_variance_from_stream(self, plaquette_spec):
        params = Phi4Params(spec=plaquette_spec, lambda_=0.0, mu=2.0, m2=2.0, normalisation="lattice_section3")
        stream = sampling_service.run_chain(params, ChainConfig(n_burn=50, n_keep=400, n_chains=2, seed=4))
        report = spectral_gap_upper(0.5, 0.05, stream)
        assert report.var_f > 0
        assert report.var_f_stderr > 0
        assert report.var_consistent is not None
