"""
One pipeline per CLI subcommand.

Every command builds its results in a ``StagedOutput`` and commits them in one
go together with ``resolved_config.json`` and ``manifest.json``; a command
that raises leaves nothing behind.
"""

import math
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import structlog
from pydantic import ValidationError

from app.config import RunConfig
from app.criterion import kappa_path, lattice_phi4_profile, lsi_lower_bound, spectral_gap_upper
from app.errors import ConfigurationError, InequalityViolation
from app.free_field import (
    counterterm,
    counterterm_scaling,
    covariance,
    covariance_moments,
    fit_bound_constant,
    bubble5_shape,
    c_psi_l1_shape,
    c_psi_l2_shape,
    mass_schedule,
    shape_sweep,
)
from app.lattice import LatticeSpec, build_lattice, field_table
from app.models import ChainConfig, Phi4Params, SusceptibilityProfile
from app.oracle import run_oracle_suite
from app.services.sampling_service import sampling_service
from app.skeleton import (
    BoundConstants,
    chi_profile,
    diagram_norms,
    log_grid,
    profile_table,
    read_profile_csv,
    small_scale_window,
    verify_bfs,
)
from app.utils import StagedOutput


logger = structlog.get_logger(__name__)

DEFAULT_EPS_SWEEP = (1.0, 0.5, 0.25, 0.125)
SHAPE_T_VALUES = (0.01, 0.1, 1.0, 10.0, 100.0)


def _spec(config: RunConfig) -> LatticeSpec:
    lattice = config.require_lattice()
    return build_lattice(lattice.d, lattice.eps, lattice.L)


def _params(config: RunConfig, spec: LatticeSpec, t: Optional[float] = None) -> Phi4Params:
    """Lattice phi^4 parameters from the model section; ``t`` overrides model.t."""
    model = config.model
    scale = t if t is not None else model.t
    try:
        return Phi4Params(
            spec=spec,
            lambda_=model.lambda_,
            mu=model.mu,
            m2=model.m2,
            t=math.inf if scale is None else scale,
            normalisation=model.normalisation,
            h=None if model.external_field is None else np.asarray(model.external_field, dtype=np.float64),
        )
    except ValidationError as e:
        raise ConfigurationError(f"model: {e.errors()[0]['msg']}") from e


def _chain_config(config: RunConfig) -> ChainConfig:
    return ChainConfig(**config.sampler.model_dump())


def _output(config: RunConfig) -> StagedOutput:
    return StagedOutput(config.output.directory)


def _commit(staged: StagedOutput, config: RunConfig, command: str) -> Dict[str, Any]:
    manifest = staged.commit(config.resolved())
    logger.info("Results written", command=command, directory=str(staged.directory), files=staged.names, digest=manifest["digest"])
    return manifest


# ---------------------------------------------------------------------------
# free field
# ---------------------------------------------------------------------------

def cmd_covariance(config: RunConfig) -> Dict[str, Any]:
    """Kernel C_t on the lattice (``covariance.csv``) plus its moments and diagram norms."""
    spec = _spec(config)
    schedule = mass_schedule(config.model.m2, config.model.t)
    kernel = covariance(spec, schedule)

    staged = _output(config)
    rows, columns = field_table(spec, value=kernel.values)
    staged.add_table("covariance.csv", rows, columns, config.output.float_format)
    staged.add_json("moments.json", {
        "m2": schedule.m2,
        "t": schedule.t,
        "m2_t": schedule.m2_t,
        "moments": covariance_moments(kernel).model_dump(),
        "diagram_norms": diagram_norms(kernel).model_dump(),
    })
    return _commit(staged, config, "covariance")


def cmd_counterterms(config: RunConfig) -> Dict[str, Any]:
    """
    a^eps over the spacing sweep, the gaps eta_t and gamma_t, the fit of a^eps
    against its divergent basis and the bound-shape constant fits.
    """
    lattice = config.require_lattice()
    model = config.model
    eps_values = sorted(lattice.eps_sweep or [e for e in DEFAULT_EPS_SWEEP if e >= lattice.eps] or [lattice.eps], reverse=True)
    t_values = [model.t] if model.t is not None else list(SHAPE_T_VALUES)

    counter_rows: List[dict] = []
    gap_rows: List[dict] = []
    bubble_vals, bubble_shapes, l1_vals, l1_shapes, l2_vals, l2_shapes, labels = [], [], [], [], [], [], []
    for eps in eps_values:
        spec = build_lattice(lattice.d, eps, lattice.L)
        report = counterterm(spec, model.lambda_, model.m2)
        counter_rows.append({
            "d": lattice.d, "eps": eps, "L": lattice.L, "m2": model.m2, "lambda": model.lambda_,
            "a_eps": report.a_eps, "tadpole": report.tadpole, "sunset": report.sunset,
        })
        for t in t_values:
            gaps = counterterm(spec, model.lambda_, model.m2, t)
            gap_rows.append({
                "d": lattice.d, "eps": eps, "L": lattice.L, "m2": model.m2, "t": t,
                "eta_t": gaps.eta_t, "gamma_t": gaps.gamma_t,
            })
            schedule = mass_schedule(model.m2, t)
            norms = diagram_norms(covariance(spec, schedule))
            m = math.sqrt(schedule.m2_t)
            bubble_vals.append(norms.bubble5)
            bubble_shapes.append(bubble5_shape(lattice.d, m))
            l1_vals.append(norms.c_psi_l1)
            l1_shapes.append(c_psi_l1_shape(lattice.d, m))
            l2_vals.append(norms.c_psi_l2)
            l2_shapes.append(c_psi_l2_shape(lattice.d, m))
            labels.append(f"eps={eps:g}")
        logger.info("Counterterm sweep point", eps=eps, a_eps=report.a_eps)

    fits = shape_sweep(lattice.d, lattice.L, eps_values, model.m2, t_values) + [
        fit_bound_constant("bubble5", bubble_vals, bubble_shapes, labels),
        fit_bound_constant("c_psi_l1", l1_vals, l1_shapes, labels),
        fit_bound_constant("c_psi_l2", l2_vals, l2_shapes, labels),
    ]

    staged = _output(config)
    staged.add_table(
        "counterterms.csv", counter_rows,
        ["d", "eps", "L", "m2", "lambda", "a_eps", "tadpole", "sunset"], config.output.float_format,
    )
    staged.add_table("gaps.csv", gap_rows, ["d", "eps", "L", "m2", "t", "eta_t", "gamma_t"], config.output.float_format)
    staged.add_json("shape_fits.json", {
        "fits": [dict(fit.model_dump(), stable=fit.stable) for fit in fits],
        "constants": BoundConstants.resolve(lattice.d, config.constants).model_dump(),
    })
    if model.lambda_ > 0 and len(eps_values) >= (2 if lattice.d == 2 else 3):
        scaling = counterterm_scaling(lattice.d, model.lambda_, model.m2, lattice.L, eps_values)
        staged.add_json("counterterm_scaling.json", scaling.model_dump(by_alias=True))
    else:
        logger.warning("Counterterm scaling skipped", lambda_=model.lambda_, n_eps=len(eps_values))
    return _commit(staged, config, "counterterms")


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def cmd_sample(config: RunConfig, workers: Optional[int] = None) -> Dict[str, Any]:
    """
    Chains at the configured (lambda, mu, m^2, t): correlation, chi, the
    skeleton-bound slack (continuum runs) and the spectral-gap upper bound.
    """
    spec = _spec(config)
    params = _params(config, spec)
    chain_config = _chain_config(config)
    fmt = config.output.float_format

    stream = sampling_service.run_chain(params, chain_config, workers)
    estimate = sampling_service.estimate_two_point(stream)

    staged = _output(config)
    rows, columns = field_table(spec, prefix="r", s_hat=estimate.s_hat, stderr=estimate.stderr)
    staged.add_table("correlation.csv", rows, columns, fmt)
    staged.add_table(
        "chi.csv",
        [{"chi_hat": estimate.chi_hat, "chi_stderr": estimate.chi_stderr, "ess": estimate.ess}],
        ["chi_hat", "chi_stderr", "ess"],
        fmt,
    )
    staged.add_table(
        "chains.csv",
        [
            {
                "chain": c.chain,
                "acceptance": c.acceptance,
                "burn_in_sweeps": c.burn_in_sweeps,
                "burn_in_converged": c.burn_in_converged,
                "proposal_width": c.proposal_width,
                "step_dt": c.step_dt,
            }
            for c in stream.chains
        ],
        ["chain", "acceptance", "burn_in_sweeps", "burn_in_converged", "proposal_width", "step_dt"],
        fmt,
    )
    staged.add_json("warnings.json", {"warnings": estimate.warnings})

    if config.output.dump_samples:
        sample_rows = [
            {"chain": c.chain, "sweep": k * chain_config.thin, "site": site, "value": float(value)}
            for c in stream.chains
            for k, sample in enumerate(c.samples)
            for site, value in enumerate(sample)
        ]
        staged.add_table("samples.csv", sample_rows, ["chain", "sweep", "site", "value"], fmt)

    if params.normalisation == "continuum" and params.h is None:
        kernel = covariance(spec, mass_schedule(params.m2, None if math.isinf(params.t) else params.t))
        bfs = verify_bfs(estimate, kernel, params)
        rows, columns = field_table(
            spec, prefix="r", lower_slack=bfs.lower_slack, upper_slack=bfs.upper_slack, stderr=bfs.stderr,
        )
        staged.add_table("bfs_slack.csv", rows, columns, fmt)
        staged.add_json("bfs_summary.json", {
            "violations": bfs.violations,
            "n_sigma": bfs.n_sigma,
            "sign_check": bfs.sign_check,
            "min_lower_slack": float(np.min(bfs.lower_slack)),
            "min_upper_slack": float(np.min(bfs.upper_slack)),
        })

    gap = spectral_gap_upper(estimate.chi_hat, estimate.chi_stderr, stream)
    staged.add_json("spectral_gap.json", gap.model_dump())

    if chain_config.scheme == "langevin_euler":
        halving = sampling_service.langevin_step_halving(params, chain_config, workers)
        staged.add_json("step_halving.json", halving.model_dump())

    return _commit(staged, config, "sample")


# ---------------------------------------------------------------------------
# profiles and the criterion
# ---------------------------------------------------------------------------

def _profile(config: RunConfig, workers: Optional[int] = None) -> Tuple[SusceptibilityProfile, Dict[str, Any]]:
    """Profile for ``grid.source`` together with the bound metadata for ``bounds.json``."""
    grid = config.grid
    model = config.model
    t_grid = log_grid(grid.t_min, grid.t_max, grid.points_per_decade)
    bounds: Dict[str, Any] = {"source": grid.source}

    if grid.source == "gaussian":
        profile = chi_profile("gaussian", t_grid, m2=model.m2)
    elif grid.source == "skeleton":
        lattice = config.require_lattice()
        spec = _spec(config) if config.constants.moment_source == "lattice" else None
        window = small_scale_window(lattice.d, model.lambda_, model.mu, model.m2, spec, config.constants)
        profile = chi_profile(
            "skeleton", t_grid, d=lattice.d, lambda_=model.lambda_, mu=model.mu, m2=model.m2,
            spec=spec, constants=config.constants, chi_cap=grid.chi_cap, window=window,
        )
        bounds["window"] = window.model_dump(by_alias=True)
        if spec is None:
            bounds["constants"] = BoundConstants.resolve(lattice.d, config.constants).model_dump()
        else:
            bounds["constants"] = {"moment_source": "lattice", "provenance": "lattice-exact"}
    elif grid.source == "mc":
        spec = _spec(config)
        profile = chi_profile(
            "mc", t_grid, params=_params(config, spec), chain_config=_chain_config(config),
            chi_cap=grid.chi_cap, workers=workers, constants=config.constants,
        )
    elif grid.source == "lattice_section3":
        chi = grid.chi_infinity or grid.chi_cap
        if chi is None:
            raise ConfigurationError("grid.chi_infinity: required for the lattice_section3 profile")
        nu = model.mu - model.m2
        profile = lattice_phi4_profile(nu, chi, t_grid, model.m2)
        bounds["nu"] = nu
    else:
        profile = read_profile_csv(grid.profile_path, model.m2, grid.chi_cap, grid.head_excess)

    if grid.chi_infinity is not None and profile.chi_infinity is None:
        profile = profile.model_copy(update={"chi_infinity": grid.chi_infinity})
    bounds["head_rule"] = profile.head_rule.model_dump()
    bounds["tail_rule"] = profile.tail_rule.model_dump()
    violations = profile.monotonicity_violations()
    if violations:
        logger.warning("Profile not monotone within errors", n_points=len(violations), first_t=violations[0])
        bounds["monotonicity_violations"] = violations
    return profile, bounds


def cmd_chi_profile(config: RunConfig, workers: Optional[int] = None) -> Dict[str, Any]:
    """``chi_profile.csv`` and ``bounds.json`` for the configured profile source."""
    profile, bounds = _profile(config, workers)
    staged = _output(config)
    rows, columns = profile_table(profile)
    staged.add_table("chi_profile.csv", rows, columns, config.output.float_format)
    bounds["profile_digest"] = profile.digest()
    staged.add_json("bounds.json", bounds)
    return _commit(staged, config, "chi-profile")


def cmd_lsi_bound(config: RunConfig, workers: Optional[int] = None) -> Dict[str, Any]:
    """Criterion lower bound on the log-Sobolev constant (``lsi_report.json``)."""
    profile, _ = _profile(config, workers)
    report = lsi_lower_bound(profile)

    staged = _output(config)
    staged.add_json("lsi_report.json", report.model_dump())
    missing = any(c is None for c in profile.chi_values)
    if not missing and profile.head_rule.kind != "none":
        t, kappa = kappa_path(profile)
        staged.add_table(
            "kappa_path.csv",
            [{"t": float(a), "kappa": float(b)} for a, b in zip(t, kappa)],
            ["t", "kappa"],
            config.output.float_format,
        )
    return _commit(staged, config, "lsi-bound")


# ---------------------------------------------------------------------------
# oracle
# ---------------------------------------------------------------------------

def cmd_verify(config: RunConfig) -> Dict[str, Any]:
    """
    Run the oracle falsification suite and write ``oracle_report.json``.

    Raises:
        InequalityViolation: After the report is written, if any check failed
    """
    report = run_oracle_suite(config.oracle, config.sampler.seed)
    staged = _output(config)
    staged.add_json("oracle_report.json", dict(report.model_dump(), passed=report.passed))
    manifest = _commit(staged, config, "verify")
    if not report.passed:
        failed = [c.name for c in report.checks if not c.passed]
        raise InequalityViolation(f"{len(failed)} oracle checks failed: {', '.join(failed)}")
    return manifest
