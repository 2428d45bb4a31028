"""
Tests for the sampling schemes, chain execution and Monte Carlo estimators.

Statistical checks compare with exact values in units of the reported
standard error: 3 for scalars, 4 for per-site arrays.
"""

import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from app.errors import ShapeError
from app.free_field import counterterm, covariance, covariance_matrix, mass_schedule
from app.lattice import build_lattice, laplacian_matrix
from app.models import ChainConfig, GeneralModel, Phi4Params
from app.modules import colour_classes
from app.modules.heatbath_module import HeatBathModule
from app.modules.metropolis_module import MetropolisModule
from app.oracle import moments
from app.services.sampling_service import (
    SchemeRegistry,
    chain_key,
    general_model_for,
    sampling_service,
    sweep_rng,
)
from tests.strategies import fields


def gaussian_params(spec, m2=1.0, mu=1.0, normalisation="lattice_section3"):
    return Phi4Params(spec=spec, lambda_=0.0, mu=mu, m2=m2, normalisation=normalisation)


class TestRandomStreams:

    def test_chain_keys_are_reproducible(self):
        assert np.array_equal(chain_key(5, 0), chain_key(5, 0))

    def test_chain_keys_differ_between_chains(self):
        assert not np.array_equal(chain_key(5, 0), chain_key(5, 1))

    def test_sweep_stream_depends_only_on_key_and_sweep(self):
        key = chain_key(1, 2)
        first = sweep_rng(key, 17).standard_normal(8)
        sweep_rng(key, 3).standard_normal(8)
        assert np.array_equal(first, sweep_rng(key, 17).standard_normal(8))
        assert not np.array_equal(first, sweep_rng(key, 18).standard_normal(8))


class TestModelMapping:

    def test_continuum_weights(self, fine_spec):
        params = Phi4Params(spec=fine_spec, lambda_=0.5, mu=2.0, m2=1.0, t=4.0)
        model, weight = general_model_for(params)
        w = fine_spec.volume_weight
        a_eps = counterterm(fine_spec, 0.5, 1.0).a_eps
        expected_A = w * (laplacian_matrix(fine_spec) + sp.identity(fine_spec.n_sites))
        assert weight == w
        assert abs(model.A - expected_A).max() < 1e-12
        assert model.g == pytest.approx(w * 0.5)
        assert model.nu == pytest.approx(w * (2.0 - 1.0 + a_eps + 0.25))

    def test_lattice_normalisation_has_no_counterterm(self, square_spec):
        params = Phi4Params(spec=square_spec, lambda_=0.5, mu=2.0, m2=1.0, normalisation="lattice_section3")
        model, weight = general_model_for(params)
        assert weight == 1.0
        assert model.nu == pytest.approx(1.0)

    def test_lattice_normalisation_needs_unit_spacing(self, fine_spec):
        with pytest.raises(ValueError, match="eps = 1"):
            Phi4Params(spec=fine_spec, lambda_=0.0, mu=1.0, normalisation="lattice_section3")

    def test_external_field_size(self, square_spec):
        with pytest.raises(ValueError, match="h has"):
            Phi4Params(spec=square_spec, lambda_=0.0, mu=1.0, h=np.zeros(3))


class TestSchemes:

    def test_checkerboard_on_even_torus(self, square_spec):
        classes = colour_classes(laplacian_matrix(square_spec).tocsr() - sp.diags(laplacian_matrix(square_spec).diagonal()))
        assert len(classes) == 2
        assert sorted(np.concatenate(classes).tolist()) == list(range(16))

    def test_registry(self):
        assert SchemeRegistry.get("METROPOLIS_SITE") is MetropolisModule
        assert SchemeRegistry.get("missing") is None
        assert "langevin_euler" in SchemeRegistry.list_available()

    @settings(max_examples=30, deadline=None)
    @given(x=fields(2), y_value=st.floats(-3.0, 3.0), site=st.integers(0, 1))
    def test_metropolis_detailed_balance(self, x, y_value, site):
        model = GeneralModel(A=np.array([[1.5, -0.5], [-0.5, 1.5]]), g=1.0, nu=0.2)
        module = MetropolisModule(model, ChainConfig(proposal_width=0.7))
        y = x.copy()
        y[site] = y_value
        forward = math.exp(-model.action(x)) * module.transition_density(x, y, site)
        backward = math.exp(-model.action(y)) * module.transition_density(y, x, site)
        assert forward == pytest.approx(backward, rel=1e-9, abs=1e-300)

    @settings(max_examples=15, deadline=None)
    @given(x=fields(2), y_value=st.floats(-3.0, 3.0), site=st.integers(0, 1))
    def test_heatbath_detailed_balance(self, x, y_value, site):
        model = GeneralModel(A=np.array([[1.5, -0.5], [-0.5, 1.5]]), g=1.0, nu=-0.3)
        module = HeatBathModule(model, ChainConfig())
        y = x.copy()
        y[site] = y_value
        forward = math.exp(-model.action(x)) * module.transition_density(x, y, site)
        backward = math.exp(-model.action(y)) * module.transition_density(y, x, site)
        assert forward == pytest.approx(backward, rel=1e-7, abs=1e-300)

    def test_site_schemes_need_the_site(self):
        model = GeneralModel(A=np.eye(1), g=0.0)
        with pytest.raises(ValueError):
            MetropolisModule(model, ChainConfig()).transition_density(np.zeros(1), np.ones(1))


class TestChains:

    def test_same_seed_same_samples(self, plaquette_spec):
        config = ChainConfig(n_burn=20, n_keep=50, n_chains=2, seed=3)
        first = sampling_service.run_chain(gaussian_params(plaquette_spec), config)
        second = sampling_service.run_chain(gaussian_params(plaquette_spec), config)
        assert np.array_equal(first.samples, second.samples)

    def test_parallel_matches_sequential(self, plaquette_spec):
        config = ChainConfig(n_burn=20, n_keep=50, n_chains=2, seed=3)
        sequential = sampling_service.run_chain(gaussian_params(plaquette_spec), config, workers=1)
        parallel = sampling_service.run_chain(gaussian_params(plaquette_spec), config, workers=2)
        assert np.array_equal(sequential.samples, parallel.samples)

    def test_estimate_needs_matching_lattice(self, plaquette_spec, square_spec):
        stream = sampling_service.run_chain(gaussian_params(plaquette_spec), ChainConfig(n_burn=10, n_keep=40, n_chains=1))
        with pytest.raises(ShapeError):
            sampling_service.estimate_two_point(stream, square_spec)

    @pytest.mark.slow
    @pytest.mark.parametrize("scheme", ["metropolis_site", "heatbath_site"])
    def test_gaussian_susceptibility(self, plaquette_spec, fast_chain, scheme):
        config = fast_chain.model_copy(update={"scheme": scheme})
        stream = sampling_service.run_chain(gaussian_params(plaquette_spec, m2=2.0, mu=2.0), config)
        estimate = sampling_service.estimate_two_point(stream)
        assert abs(estimate.chi_hat - 0.5) <= 3.0 * estimate.chi_stderr

    @pytest.mark.slow
    def test_gaussian_two_point_per_site(self, plaquette_spec, fast_chain):
        stream = sampling_service.run_chain(gaussian_params(plaquette_spec), fast_chain)
        estimate = sampling_service.estimate_moments(stream)
        exact = covariance_matrix(covariance(plaquette_spec, mass_schedule(1.0)))
        assert np.all(np.abs(estimate.second - exact) <= 4.0 * estimate.second_stderr)

    @pytest.mark.slow
    def test_quartic_two_point_against_oracle(self, plaquette_spec, fast_chain):
        params = Phi4Params(spec=plaquette_spec, lambda_=1.0, mu=1.0, m2=1.0, normalisation="lattice_section3")
        model, _ = general_model_for(params)
        exact = moments(model.with_changes(A=model.dense_A())).second
        stream = sampling_service.run_chain(params, fast_chain.model_copy(update={"scheme": "heatbath_site"}))
        estimate = sampling_service.estimate_moments(stream)
        assert np.all(np.abs(estimate.second - exact) <= 4.0 * estimate.second_stderr)

    @pytest.mark.slow
    def test_langevin_step_halving_removes_bias(self):
        spec = build_lattice(2, 1.0, 1.0)
        config = ChainConfig(scheme="langevin_euler", step_dt=0.1, n_burn=200, n_keep=20000, n_chains=4, seed=5)
        report = sampling_service.langevin_step_halving(gaussian_params(spec), config)
        assert abs(report.extrapolated - 1.0) <= 3.0 * report.extrapolated_stderr + 0.01
