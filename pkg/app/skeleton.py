"""
Skeleton-inequality bound engine.

Starting from the two-sided skeleton bounds on S_t - C_t,

    S - C >= -3 lam S(0) C*S + 6 lam^2 C*S^3*S - 54 lam^3 C*Q*S - (a + mu - m^2) S*C
    S - C <= -3 lam S(0) C*S + 6 lam^2 C*S^3*S - (a + mu - m^2) S*C,    Q = S (S^2 * S^2),

this module

* evaluates the diagram norms of a lattice kernel exactly,
* checks both bounds against sampled two-point functions,
* closes the L^1 cap L^inf recursion for E = S - C on a small-scale window,
* turns the L^1 recursion into a bound p_t(lambda) on ||E||_{L^1}, hence on chi_t.

Moment-type inputs come either from an exact lattice kernel or, spec-free,
from bound shapes times named constants. Every constant carries a provenance
tag so reports say which numbers are exact and which are fitted.
"""

import math
from functools import lru_cache
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog
from numpy.polynomial import Polynomial
from pydantic import BaseModel, ConfigDict, Field
from scipy import integrate, special

from app.config import ConstantsConfig
from app.criterion import brascamp_lieb_head, quadrature_head
from app.errors import ConfigurationError, DomainError, ShapeError
from app.free_field import (
    CovarianceKernel,
    bubble5_shape,
    c2_shape,
    c_psi_l1_shape,
    c_psi_l2_shape,
    counterterm,
    counterterm_gaps,
    covariance,
    covariance_moments,
    eta_shape,
    fit_bound_constant,
    gamma_shape,
    mass_schedule,
)
from app.lattice import LatticeSpec, build_lattice, convolve, fourier, lp_norm
from app.models import (
    BfsSlackReport,
    BoundPolynomial,
    ChainConfig,
    CorrelationEstimate,
    DiagramNorms,
    HeadRule,
    MassSchedule,
    Phi4Params,
    ProvenancedValue,
    SusceptibilityProfile,
    TailRule,
    WindowCertificate,
)
from app.services.sampling_service import sampling_service


logger = structlog.get_logger(__name__)

# prefactors of the lambda, lambda^2 and lambda^3 skeleton terms
TADPOLE_FACTOR = 3.0
SUNSET_FACTOR = 6.0
Q_FACTOR = 54.0

DEFAULT_T_MIN = 1e-6
DEFAULT_T_MAX = 1e6
WINDOW_POINTS_PER_DECADE = 10
PSI_FIT_HEADROOM = 0.1
FIXED_POINT_RTOL = 1e-12


def log_grid(t_min: float = DEFAULT_T_MIN, t_max: float = DEFAULT_T_MAX, points_per_decade: int = 200) -> np.ndarray:
    """Log-spaced scale grid including both end points."""
    if not 0 < t_min < t_max:
        raise ConfigurationError(f"scale grid needs 0 < t_min < t_max, got ({t_min}, {t_max})")
    decades = math.log10(t_max / t_min)
    n = max(int(math.ceil(decades * points_per_decade)) + 1, 2)
    return np.logspace(math.log10(t_min), math.log10(t_max), n)


# ---------------------------------------------------------------------------
# diagram norms
# ---------------------------------------------------------------------------

def diagram_norms(kernel: CovarianceKernel) -> DiagramNorms:
    """
    Exact lattice norms of psi = C^3 - 1_0 ||C^3||_1 and of the bubble chains.

    Args:
        kernel: Covariance on its lattice

    Returns:
        DiagramNorms; psi_hat_max is filled in for d = 3
    """
    spec = kernel.spec
    w = spec.volume_weight
    c = kernel.values
    moments = covariance_moments(kernel)
    c2 = c * c

    psi = c**3 - spec.delta() * moments.c3_l1
    c_psi = convolve(c, psi, spec)
    c_psi_c = convolve(c_psi, c, spec)
    cc = convolve(c, c, spec)
    cc2 = convolve(c, c2, spec)

    norms = DiagramNorms(
        psi_l1=lp_norm(psi, 1, spec),
        psi_mass=float(w * np.sum(psi)),
        c_psi_l1=lp_norm(c_psi, 1, spec),
        c_psi_l2=lp_norm(c_psi, 2, spec),
        c_psi_c_l1=lp_norm(c_psi_c, 1, spec),
        c_psi_c_linf=lp_norm(c_psi_c, math.inf, spec),
        bubble5=float(w * np.sum(np.abs(c * convolve(c2, c2, spec)))),
        c_c_c2=float(w * np.sum(np.abs(c * cc2))),
        c_c_c=float(w * np.sum(np.abs(c * cc))),
        c_c_linf=lp_norm(cc, math.inf, spec),
        c_c_c_linf=lp_norm(convolve(cc, c, spec), math.inf, spec),
        c_c2_c_linf=lp_norm(convolve(cc2, c, spec), math.inf, spec),
        psi_hat_max=float(np.max(np.abs(fourier(psi, spec)))) if spec.d == 3 else None,
        moments=moments,
    )
    logger.debug("Diagram norms evaluated", n_sites=spec.n_sites, m2_t=kernel.schedule.m2_t, bubble5=norms.bubble5)
    return norms


# ---------------------------------------------------------------------------
# constants
# ---------------------------------------------------------------------------

def _radial_integral(d: int, integrand: Callable[[float], float]) -> float:
    """int d^dk / (2 pi)^d f(|k|) for a radial f."""
    area = 2.0 * math.pi ** (d / 2.0) / special.gamma(d / 2.0)
    value, _ = integrate.quad(lambda k: k ** (d - 1) * integrand(k), 0.0, math.inf, limit=200)
    return area * value / (2.0 * math.pi) ** d


@lru_cache(maxsize=None)
def continuum_c2_constant(d: int) -> float:
    """||C^2||_1 at unit mass: 1/(4 pi) in d=2, 1/(8 pi) in d=3."""
    return _radial_integral(d, lambda k: (k * k + 1.0) ** -2)


@lru_cache(maxsize=None)
def continuum_c3_constant() -> float:
    """||C^3||_1 at unit mass in d=2, with C(x) = K_0(|x|) / (2 pi)."""
    value, _ = integrate.quad(lambda r: 2.0 * math.pi * r * (special.k0(r) / (2.0 * math.pi)) ** 3, 0.0, math.inf, limit=200)
    return value


def _bubble(d: int, k: float) -> float:
    """Fourier transform of C^2 at unit mass (Feynman-parameter form)."""
    prefactor = special.gamma(2.0 - d / 2.0) / (4.0 * math.pi) ** (d / 2.0)
    value, _ = integrate.quad(lambda x: (1.0 + x * (1.0 - x) * k * k) ** (d / 2.0 - 2.0), 0.0, 1.0)
    return prefactor * value


@lru_cache(maxsize=None)
def continuum_bubble5_constant(d: int) -> float:
    """||C (C^2 * C^2)||_1 at unit mass, as int C_hat(k) B(k)^2."""
    return _radial_integral(d, lambda k: _bubble(d, k) ** 2 / (k * k + 1.0))


@lru_cache(maxsize=None)
def fitted_psi_constants_d3(
    L: float = 4.0,
    eps_values: Tuple[float, ...] = (0.5, 0.25),
    masses_sq: Tuple[float, ...] = (1.0, 4.0, 16.0),
) -> Tuple[float, float]:
    """
    (c_psi_l1, c_psi_l2) in d=3, fitted on an eps-refinement sweep with headroom.

    The ||C * psi|| norms have no closed continuum form; the constant is the
    largest ratio to the bound shape over the sweep.
    """
    l1_vals, l1_shapes, l2_vals, l2_shapes, labels = [], [], [], [], []
    for eps in eps_values:
        spec = build_lattice(3, eps, L)
        for m2 in masses_sq:
            norms = diagram_norms(covariance(spec, mass_schedule(m2)))
            m = math.sqrt(m2)
            l1_vals.append(norms.c_psi_l1)
            l1_shapes.append(c_psi_l1_shape(3, m))
            l2_vals.append(norms.c_psi_l2)
            l2_shapes.append(c_psi_l2_shape(3, m))
            labels.append(f"eps={eps:g}")
    fit_l1 = fit_bound_constant("c_psi_l1", l1_vals, l1_shapes, labels)
    fit_l2 = fit_bound_constant("c_psi_l2", l2_vals, l2_shapes, labels)
    logger.info("Fitted d=3 psi constants", c_psi_l1=fit_l1.constant, c_psi_l2=fit_l2.constant)
    return fit_l1.constant * (1.0 + PSI_FIT_HEADROOM), fit_l2.constant * (1.0 + PSI_FIT_HEADROOM)


class BoundConstants(BaseModel):
    """Named constants multiplying the bound shapes, with provenance."""
    d: int
    c_c2: ProvenancedValue
    c_c3: Optional[ProvenancedValue] = Field(default=None, description="d=2 only")
    c_bubble5: ProvenancedValue
    c_psi_l1: ProvenancedValue
    c_psi_l2: ProvenancedValue
    c_eta: ProvenancedValue
    c_gamma: ProvenancedValue

    @classmethod
    def resolve(cls, d: int, overrides: Optional[ConstantsConfig] = None) -> "BoundConstants":
        """
        Defaults from continuum integrals; any value set in ``overrides`` wins.

        Raises:
            ConfigurationError: If d is not 2 or 3
        """
        if d not in (2, 3):
            raise ConfigurationError(f"bound constants exist for d in (2, 3), got {d}")
        overrides = overrides or ConstantsConfig()

        def pick(name: str, default: float, provenance: str) -> ProvenancedValue:
            value = getattr(overrides, name, None)
            if value is not None:
                return ProvenancedValue(value=value, provenance="user")
            return ProvenancedValue(value=default, provenance=provenance)

        c_c2 = pick("c_c2", continuum_c2_constant(d), "continuum-integral")
        c_bubble5 = pick("c_bubble5", continuum_bubble5_constant(d), "continuum-integral")
        c_eta = ProvenancedValue(value=1.0 / (4.0 * math.pi), provenance="continuum-integral")
        if d == 2:
            c_c3 = pick("c_c3", continuum_c3_constant(), "continuum-integral")
            # ||C * psi||_1 <= ||C||_1 ||psi||_1 <= 2 ||C||_1 ||C^3||_1
            c_psi_l1 = pick("c_psi_l1", 2.0 * c_c3.value, "continuum-integral")
            c_psi_l2 = pick("c_psi_l2", 2.0 * c_c3.value * math.sqrt(c_c2.value), "continuum-integral")
            c_gamma = ProvenancedValue(value=c_c3.value, provenance=c_c3.provenance)
        else:
            c_c3 = None
            fitted_l1, fitted_l2 = fitted_psi_constants_d3()
            c_psi_l1 = pick("c_psi_l1", fitted_l1, "fitted-c")
            c_psi_l2 = pick("c_psi_l2", fitted_l2, "fitted-c")
            c_gamma = ProvenancedValue(value=1.0 / (32.0 * math.pi**2), provenance="continuum-integral")
        return cls(
            d=d,
            c_c2=c_c2,
            c_c3=c_c3,
            c_bubble5=c_bubble5,
            c_psi_l1=c_psi_l1,
            c_psi_l2=c_psi_l2,
            c_eta=c_eta,
            c_gamma=c_gamma,
        )


class MomentInputs(BaseModel):
    """
    Moment-type quantities of C_t entering the recursion.

    ``l1`` is ||C_t||_1 = 1/m_t^2 and ``l2_sq`` is ||C_t^2||_1 = ||C_t||_2^2.
    """
    model_config = ConfigDict(frozen=True)

    d: int
    m2: float
    t: float
    l1: float
    l2_sq: float
    eta: float = Field(..., ge=0)
    gamma: float = Field(..., ge=0)
    bubble5: float
    c_psi_l1: float
    c_psi_c_l1: float
    c_psi_c_linf: float
    c_c_c2: float
    c_c_c: float
    c_c_c_linf: float
    c_c2_c_linf: float
    provenance: Literal["lattice-exact", "fitted-c"]

    @classmethod
    def from_kernel(cls, kernel: CovarianceKernel) -> "MomentInputs":
        """Exact lattice values; the gaps are taken at the kernel's own (m^2, t)."""
        schedule = kernel.schedule
        norms = diagram_norms(kernel)
        eta, gamma = counterterm_gaps(kernel.spec, schedule.m2, schedule.t)
        return cls(
            d=kernel.spec.d,
            m2=schedule.m2,
            t=schedule.t,
            l1=norms.moments.l1,
            l2_sq=norms.moments.l2_sq,
            eta=eta,
            gamma=gamma,
            bubble5=norms.bubble5,
            c_psi_l1=norms.c_psi_l1,
            c_psi_c_l1=norms.c_psi_c_l1,
            c_psi_c_linf=norms.c_psi_c_linf,
            c_c_c2=norms.c_c_c2,
            c_c_c=norms.c_c_c,
            c_c_c_linf=norms.c_c_c_linf,
            c_c2_c_linf=norms.c_c2_c_linf,
            provenance="lattice-exact",
        )

    @classmethod
    def from_constants(cls, d: int, m2: float, t: float, constants: BoundConstants) -> "MomentInputs":
        """Spec-free values: bound shapes at m_t times the named constants."""
        if constants.d != d:
            raise ConfigurationError(f"constants resolved for d={constants.d}, requested d={d}")
        schedule = MassSchedule(m2=m2, t=t)
        m = math.sqrt(schedule.m2_t)
        l1 = 1.0 / schedule.m2_t
        l2_sq = constants.c_c2.value * c2_shape(d, m)
        c_psi_l1 = constants.c_psi_l1.value * c_psi_l1_shape(d, m)
        c_psi_l2 = constants.c_psi_l2.value * c_psi_l2_shape(d, m)
        return cls(
            d=d,
            m2=m2,
            t=t,
            l1=l1,
            l2_sq=l2_sq,
            eta=constants.c_eta.value * eta_shape(d, m2, t),
            gamma=constants.c_gamma.value * gamma_shape(d, m2, t),
            bubble5=constants.c_bubble5.value * bubble5_shape(d, m),
            c_psi_l1=c_psi_l1,
            # Young and Cauchy-Schwarz on top of the fitted norms
            c_psi_c_l1=l1 * c_psi_l1,
            c_psi_c_linf=math.sqrt(l2_sq) * c_psi_l2,
            c_c_c2=l2_sq**2,
            c_c_c=l1 * l2_sq,
            c_c_c_linf=l1 * l2_sq,
            c_c2_c_linf=l2_sq**2,
            provenance="fitted-c",
        )


def moment_inputs(
    d: int,
    m2: float,
    t: float,
    spec: Optional[LatticeSpec] = None,
    constants: Optional[ConstantsConfig] = None,
) -> MomentInputs:
    """
    Lattice-exact inputs when a lattice is given and ``moment_source`` allows
    it, shape-based inputs otherwise.
    """
    constants = constants or ConstantsConfig()
    if spec is not None and constants.moment_source == "lattice":
        if spec.d != d:
            raise ConfigurationError(f"lattice has d={spec.d}, requested d={d}")
        return MomentInputs.from_kernel(covariance(spec, MassSchedule(m2=m2, t=t)))
    return MomentInputs.from_constants(d, m2, t, BoundConstants.resolve(d, constants))


# ---------------------------------------------------------------------------
# skeleton bounds on sampled data
# ---------------------------------------------------------------------------

def bfs_bounds(
    s: np.ndarray,
    c: np.ndarray,
    lambda_: float,
    mass_excess: float,
    spec: LatticeSpec,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Right-hand sides of the lower and upper skeleton bounds on S - C.

    Args:
        s: Two-point function S(x)
        c: Free covariance C(x) at the same scale
        lambda_: Quartic coupling
        mass_excess: a^eps + mu - m^2
        spec: Lattice of both fields

    Returns:
        (lower_rhs, upper_rhs)
    """
    origin = (0,) * spec.d
    cs = convolve(c, s, spec)
    s2 = s * s
    sunset = convolve(c, convolve(s2 * s, s, spec), spec)
    q = s * convolve(s2, s2, spec)
    upper = -TADPOLE_FACTOR * lambda_ * s[origin] * cs + SUNSET_FACTOR * lambda_**2 * sunset - mass_excess * cs
    lower = upper - Q_FACTOR * lambda_**3 * convolve(c, convolve(q, s, spec), spec)
    return lower, upper


def _mass_excess(params: Phi4Params) -> float:
    a_eps = 0.0
    if params.normalisation == "continuum":
        a_eps = counterterm(params.spec, params.lambda_, params.m2).a_eps
    return a_eps + params.mu - params.m2


def verify_bfs(
    estimate: CorrelationEstimate,
    kernel: CovarianceKernel,
    params: Phi4Params,
    n_sigma: float = 3.0,
) -> BfsSlackReport:
    """
    Slack of both skeleton bounds at every displacement, in propagated stderr.

    Errors are propagated by a jackknife over the batch means of the
    estimate; without batch means only the stderr of S enters.

    Raises:
        ShapeError: If estimate, kernel and parameters live on different lattices
        ConfigurationError: If the kernel is not C_t for the parameters' (m^2, t)
    """
    spec = estimate.spec
    if kernel.spec != spec or params.spec != spec:
        raise ShapeError("estimate, kernel and parameters must share one lattice")
    if kernel.schedule.m2 != params.m2 or kernel.schedule.t != params.t:
        raise ConfigurationError("kernel must be C_t at the parameters' m2 and t")

    c = kernel.values
    excess = _mass_excess(params)

    def slacks(s: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        lower, upper = bfs_bounds(s, c, params.lambda_, excess, spec)
        lhs = s - c
        return lhs - lower, upper - lhs, lower, upper

    lower_value, upper_value, lower_rhs, upper_rhs = slacks(estimate.s_hat)

    batches = estimate.batch_means
    if batches is not None and batches.shape[0] > 1:
        n = batches.shape[0]
        total = batches.sum(axis=0)
        replicas = [slacks((total - batches[i]) / (n - 1)) for i in range(n)]
        lower_reps = np.stack([r[0] for r in replicas])
        upper_reps = np.stack([r[1] for r in replicas])
        lower_err = np.sqrt((n - 1) / n * np.sum((lower_reps - lower_reps.mean(axis=0)) ** 2, axis=0))
        upper_err = np.sqrt((n - 1) / n * np.sum((upper_reps - upper_reps.mean(axis=0)) ** 2, axis=0))
    else:
        lower_err = upper_err = np.asarray(estimate.stderr, dtype=np.float64)

    floor = 1e-12 * float(np.max(np.abs(c)))
    lower_err = np.maximum(lower_err, floor)
    upper_err = np.maximum(upper_err, floor)
    scale = float(np.max(np.abs(upper_rhs))) + floor

    report = BfsSlackReport(
        spec=spec,
        lower_slack=lower_value / lower_err,
        upper_slack=upper_value / upper_err,
        stderr=np.maximum(lower_err, upper_err),
        lower_rhs=lower_rhs,
        upper_rhs=upper_rhs,
        lhs=estimate.s_hat - c,
        n_sigma=n_sigma,
        sign_check=bool(np.all(lower_rhs <= upper_rhs + 1e-12 * scale)),
    )
    if report.violations:
        logger.warning("Skeleton bound violated", violations=report.violations, n_sigma=n_sigma)
    else:
        logger.info(
            "Skeleton bounds hold",
            min_lower_slack=float(report.lower_slack.min()),
            min_upper_slack=float(report.upper_slack.min()),
        )
    return report


# ---------------------------------------------------------------------------
# recursion for E = S - C
# ---------------------------------------------------------------------------

def _propagated(m: MomentInputs, e_inf, e_l1):
    """(L^inf, L^1) bounds on C * S given the norms of E."""
    return m.l1 * e_inf + m.l2_sq, m.l1 * (e_l1 + m.l1)


def _q_bound(m: MomentInputs, e, e1):
    """||Q||_1 with Q = S (S^2 * S^2), expanded around C."""
    return (
        m.bubble5
        + e * (m.l2_sq**2 + 4.0 * m.c_c_c2)
        + e**2 * (6.0 * m.l2_sq * m.l1 + 4.0 * m.c_c_c)
        + e**2 * (2.0 * e1 * m.l2_sq + 8.0 * e * m.l1**2)
        + 5.0 * e**3 * e1 * m.l1
        + e**3 * e1**2
    )


def _cubic_difference(m: MomentInputs, e, e1):
    """(L^inf, L^1) bounds on C * (S^3 - C^3) * S."""
    linf = (
        3.0 * e * m.c_c2_c_linf
        + 3.0 * e**2 * (m.c_c_c_linf + m.l2_sq * m.l1)
        + 4.0 * e**3 * m.l1**2
        + e**3 * e1 * m.l1
    )
    l1 = m.l1 * (m.l1 + e1) * (3.0 * e * m.l2_sq + 3.0 * e**2 * m.l1 + e**2 * e1)
    return linf, l1


def _term_bounds(m: MomentInputs, mass_gap: float, e, e1) -> Dict[int, Tuple[object, object]]:
    """
    Coefficient of lambda^k (k = 0..3) in the bound on E, split into its
    (L^inf, L^1) parts. ``e`` bounds ||E||_inf and ``e1`` bounds ||E||_1;
    both may be numbers or polynomials.
    """
    cs_inf, cs_l1 = _propagated(m, e, e1)
    cubic_inf, cubic_l1 = _cubic_difference(m, e, e1)
    q = _q_bound(m, e, e1)
    return {
        0: (mass_gap * cs_inf, mass_gap * cs_l1),
        1: (TADPOLE_FACTOR * (m.eta + e) * cs_inf, TADPOLE_FACTOR * (m.eta + e) * cs_l1),
        2: (
            SUNSET_FACTOR * (cubic_inf + m.gamma * cs_inf + m.c_psi_l1 * e + m.c_psi_c_linf),
            SUNSET_FACTOR * (cubic_l1 + m.gamma * cs_l1 + m.c_psi_l1 * e1 + m.c_psi_c_l1),
        ),
        3: (Q_FACTOR * q * cs_inf, Q_FACTOR * q * cs_l1),
    }


def _check_inputs(m: MomentInputs) -> None:
    values = m.model_dump(exclude={"d", "m2", "t", "provenance"})
    bad = [name for name, value in values.items() if value is None or not math.isfinite(value) or value < 0]
    if bad:
        raise ConfigurationError(f"moment inputs unresolved or invalid: {', '.join(sorted(bad))}")


def taken_out_term(m: MomentInputs) -> float:
    """3 eta_t (||C||_2^2 + ||C||_1^2): the lambda-linear part of the bound at E = 0."""
    return TADPOLE_FACTOR * m.eta * (m.l2_sq + m.l1**2)


def e_bound_l1linf(trial: float, lambda_: float, mu: float, moments: MomentInputs) -> float:
    """
    Right-hand side of the L^1 cap L^inf recursion at a trial value of ||E||.

    The result is non-decreasing in ``trial`` and vanishes identically for
    lambda = 0, mu = m^2.

    Raises:
        DomainError: If trial or lambda is negative
        ConfigurationError: If a moment input is missing or invalid
    """
    if trial < 0 or lambda_ < 0:
        raise DomainError("trial norm and lambda must be non-negative")
    _check_inputs(moments)
    terms = _term_bounds(moments, abs(mu - moments.m2), trial, trial)
    return float(sum(lambda_**k * (linf + l1) for k, (linf, l1) in terms.items()))


def _window_remainder(trial: float, lambda_: float, mu: float, moments: MomentInputs) -> float:
    """The recursion without its taken-out part lambda * taken_out_term."""
    return e_bound_l1linf(trial, lambda_, mu, moments) - lambda_ * taken_out_term(moments)


def small_scale_window(
    d: int,
    lambda_: float,
    mu: float,
    m2: float,
    spec: Optional[LatticeSpec] = None,
    constants: Optional[ConstantsConfig] = None,
    t_grid: Optional[Sequence[float]] = None,
) -> WindowCertificate:
    """
    Largest grid scale t0 such that f_t(2 c0 lambda) <= c0 lambda / 2 at every
    grid point t <= t0.

    By continuity of t -> ||E_t|| and ||E_t|| -> 0 as t -> 0 this certifies
    ||E_t||_{L^1 cap L^inf} <= 2 c0 lambda on (0, t0]. When the inequality
    also holds at t = inf the window covers all scales (t0 = inf). A failure
    at the smallest grid point is reported as an empty window.

    c0 is the supremum over the grid of 3 eta_t (||C_t||_2^2 + ||C_t||_1^2)
    plus ``constants.c0_headroom``, unless ``constants.c0`` is given.
    """
    if lambda_ < 0:
        raise DomainError(f"lambda must be non-negative, got {lambda_}")
    constants = constants or ConstantsConfig()
    grid = np.asarray(t_grid if t_grid is not None else log_grid(points_per_decade=WINDOW_POINTS_PER_DECADE))
    inputs = [moment_inputs(d, m2, float(t), spec, constants) for t in grid]
    at_infinity = moment_inputs(d, m2, math.inf, spec, constants)

    observed = max(taken_out_term(m) for m in inputs)
    if constants.c0 is not None:
        c0 = ProvenancedValue(value=constants.c0, provenance="user")
    else:
        c0 = ProvenancedValue(value=observed * (1.0 + constants.c0_headroom), provenance="observed-sup")
    assumption_ok = c0.value >= observed
    if not assumption_ok:
        logger.warning("c0 below the observed supremum of the counterterm gap term", c0=c0.value, observed=observed)

    claim = 2.0 * c0.value * lambda_
    budget = 0.5 * c0.value * lambda_
    margins: List[Tuple[float, float]] = []
    t0: Optional[float] = None
    for t, m in zip(grid, inputs):
        margin = budget - _window_remainder(claim, lambda_, mu, m)
        margins.append((float(t), float(margin)))
        if margin < 0:
            break
        t0 = float(t)
    else:
        margin = budget - _window_remainder(claim, lambda_, mu, at_infinity)
        margins.append((math.inf, float(margin)))
        if margin >= 0:
            t0 = math.inf

    certificate = WindowCertificate(
        t0=t0,
        empty=t0 is None,
        c0=c0,
        c0_observed_sup=observed,
        c0_assumption_ok=assumption_ok,
        claim_bound=claim,
        margins=margins,
        lambda_=lambda_,
        d=d,
        mu=mu,
        m2=m2,
    )
    if certificate.empty:
        logger.warning("Small-scale window is empty", d=d, lambda_=lambda_, mu=mu, m2=m2, margin=margins[0][1])
    else:
        logger.info("Small-scale window certified", d=d, lambda_=lambda_, t0=t0, c0=c0.value, n_margins=len(margins))
    return certificate


def susceptibility_bound_polynomial(
    t: float,
    d: int,
    lambda_: float,
    mu: float,
    m2: float,
    e_linf_input: float,
    spec: Optional[LatticeSpec] = None,
    constants: Optional[ConstantsConfig] = None,
    moments: Optional[MomentInputs] = None,
) -> BoundPolynomial:
    """
    Bound p_t(lambda) on ||E_t||_{L^1}.

    With ||E||_inf frozen at ``e_linf_input`` the L^1 recursion reads
    y <= G + a1 y + R(y), R holding the quadratic and cubic powers of y. The
    affine part is solved in closed form and the rest iterated from
    y = G / (1 - a1), which selects the smallest fixed point. The value is
    split by the explicit powers of lambda in front of each skeleton term.

    Returns:
        BoundPolynomial; ``available`` is False when a1 >= 1 or the iteration diverges
    """
    if lambda_ < 0 or e_linf_input < 0:
        raise DomainError("lambda and e_linf_input must be non-negative")
    constants = constants or ConstantsConfig()
    m = moments or moment_inputs(d, m2, t, spec, constants)
    _check_inputs(m)
    mass_gap = abs(mu - m2)
    y = Polynomial([0.0, 1.0])
    terms = _term_bounds(m, mass_gap, e_linf_input, y)
    by_power = {k: Polynomial(l1) if not isinstance(l1, Polynomial) else l1 for k, (_, l1) in terms.items()}
    total = sum((lambda_**k * p for k, p in by_power.items()), Polynomial([0.0]))
    coef = np.zeros(4)
    n_coef = min(total.coef.size, 4)
    coef[:n_coef] = total.coef[:n_coef]
    g0, a1, higher = coef[0], coef[1], coef[2:]

    common = dict(lambda_=lambda_, t=t, d=d, mu=mu, m2=m2, e_linf_input=e_linf_input)
    if a1 >= 1.0:
        logger.warning("Linear coefficient of the L1 recursion is not contractive", t=t, a1=float(a1))
        return BoundPolynomial(
            coefficients=[], value=math.inf, iterations=0, converged=False,
            available=False, reason=f"linear coefficient {a1:.6g} >= 1", **common,
        )

    def step(value: float) -> float:
        return (g0 + higher[0] * value**2 + higher[1] * value**3) / (1.0 - a1)

    current = g0 / (1.0 - a1)
    doublings = 0
    converged = False
    iterations = 0
    for iterations in range(1, constants.max_iterations + 1):
        nxt = step(current)
        if not math.isfinite(nxt):
            break
        if current > 0 and nxt > 2.0 * current:
            doublings += 1
            if doublings >= 2:
                break
        else:
            doublings = 0
        done = abs(nxt - current) <= FIXED_POINT_RTOL * max(abs(nxt), 1e-300)
        current = nxt
        if done:
            converged = True
            break

    if not converged:
        logger.warning("L1 fixed-point iteration did not converge", t=t, lambda_=lambda_, iterations=iterations)
        return BoundPolynomial(
            coefficients=[], value=math.inf, iterations=iterations, converged=False,
            available=False, reason="fixed-point iteration diverged", **common,
        )

    tag = "explicit" if m.provenance == "lattice-exact" else "fitted-c"
    coefficients = [(k, max(float(p(current)), 0.0), tag) for k, p in sorted(by_power.items())]
    value = float(sum(lambda_**k * c for k, c, _ in coefficients))
    return BoundPolynomial(
        coefficients=coefficients, value=value, iterations=iterations, converged=True, **common,
    )


# ---------------------------------------------------------------------------
# susceptibility profiles
# ---------------------------------------------------------------------------

def skeleton_head(
    t0: float,
    window: WindowCertificate,
    spec: Optional[LatticeSpec] = None,
    constants: Optional[ConstantsConfig] = None,
) -> HeadRule:
    """
    Head rule below t0 from chi_s - ||C_s||_1 <= p_s(lambda) on the window.

    Empty when the window does not reach t0.
    """
    if window.t0 is None or t0 > window.t0:
        return HeadRule()

    def excess(s: float) -> Optional[float]:
        poly = susceptibility_bound_polynomial(
            s, window.d, window.lambda_, window.mu, window.m2, window.claim_bound, spec, constants,
        )
        return poly.value if poly.available else None

    return quadrature_head(excess, t0, window.m2)


def gaussian_profile(t_grid: Sequence[float], m2: float) -> SusceptibilityProfile:
    """chi_t = ||C_t||_1 = 1 / (m^2 + 1/t) at every grid point."""
    t = np.asarray(t_grid, dtype=np.float64)
    return SusceptibilityProfile(
        t_grid=t.tolist(),
        chi_values=(1.0 / (m2 + 1.0 / t)).tolist(),
        provenance=["gaussian_exact"] * t.size,
        m2=m2,
        head_rule=HeadRule(kind="gaussian"),
        tail_rule=TailRule(kind="gaussian"),
        chi_infinity=1.0 / m2,
    )


def skeleton_profile(
    t_grid: Sequence[float],
    d: int,
    lambda_: float,
    mu: float,
    m2: float,
    spec: Optional[LatticeSpec] = None,
    constants: Optional[ConstantsConfig] = None,
    chi_cap: Optional[float] = None,
    window: Optional[WindowCertificate] = None,
) -> SusceptibilityProfile:
    """
    chi_t <= ||C_t||_1 + p_t(lambda) on the certified window, the Griffiths
    cap chi_t <= chi_inf <= chi_cap beyond it (when supplied). Below the grid
    the bound polynomial is integrated by ``skeleton_head``.

    If the window covers all scales the bound at t = inf becomes the cap of
    the tail rule. A certificate computed earlier for the same parameters
    may be passed as ``window``.
    """
    constants = constants or ConstantsConfig()
    window = window or small_scale_window(d, lambda_, mu, m2, spec, constants)
    e_inf = window.claim_bound
    t0 = window.t0 if window.t0 is not None else 0.0

    values: List[Optional[float]] = []
    provenance: List[str] = []
    for t in t_grid:
        bound = None
        if t <= t0:
            poly = susceptibility_bound_polynomial(float(t), d, lambda_, mu, m2, e_inf, spec, constants)
            if poly.available:
                bound = 1.0 / (m2 + 1.0 / t) + poly.value
        if bound is None and chi_cap is not None:
            values.append(chi_cap)
            provenance.append("griffiths_cap")
        else:
            values.append(bound)
            provenance.append("skeleton_bound")

    tail = TailRule(kind="cap", chi_cap=chi_cap) if chi_cap is not None else TailRule()
    if math.isinf(t0):
        poly = susceptibility_bound_polynomial(math.inf, d, lambda_, mu, m2, e_inf, spec, constants)
        if poly.available:
            cap = 1.0 / m2 + poly.value
            tail = TailRule(kind="cap", chi_cap=min(cap, chi_cap) if chi_cap is not None else cap)

    head = skeleton_head(float(t_grid[0]), window, spec, constants)
    uncovered = sum(v is None for v in values)
    logger.info("Skeleton profile assembled", d=d, lambda_=lambda_, t0=window.t0, uncovered=uncovered, head_rule=head.kind)
    return SusceptibilityProfile(
        t_grid=[float(t) for t in t_grid],
        chi_values=values,
        provenance=provenance,
        m2=m2,
        head_rule=head,
        tail_rule=tail,
    )


def mc_head(t0: float, params: Phi4Params, constants: Optional[ConstantsConfig] = None) -> HeadRule:
    """
    Head rule for a sampled profile: the Brascamp-Lieb bound for the
    unit-spacing model, the skeleton bound for the continuum model. Sampling
    in an external field has no head bound.
    """
    if params.h is not None:
        return HeadRule()
    if params.normalisation == "lattice_section3":
        return brascamp_lieb_head(params.mu - params.m2, params.m2, t0)
    window = small_scale_window(params.spec.d, params.lambda_, params.mu, params.m2, params.spec, constants)
    return skeleton_head(t0, window, params.spec, constants)


def mc_profile(
    t_grid: Sequence[float],
    params: Phi4Params,
    chain_config: ChainConfig,
    chi_cap: Optional[float] = None,
    workers: Optional[int] = None,
    constants: Optional[ConstantsConfig] = None,
) -> SusceptibilityProfile:
    """
    Monte Carlo chi_t per grid point, plus chi at t = inf for the gap bound.

    Without a supplied cap the tail is capped at chi_inf + 3 stderr. The head
    comes from ``mc_head``.
    """
    values, errors = [], []
    for t in list(t_grid) + [math.inf]:
        stream = sampling_service.run_chain(params.with_changes(t=float(t)), chain_config, workers)
        estimate = sampling_service.estimate_two_point(stream)
        values.append(estimate.chi_hat)
        errors.append(estimate.chi_stderr)
        logger.info("Profile point sampled", t=t, chi=estimate.chi_hat, stderr=estimate.chi_stderr)

    chi_inf, chi_inf_err = values.pop(), errors.pop()
    cap = chi_cap if chi_cap is not None else chi_inf + 3.0 * chi_inf_err
    return SusceptibilityProfile(
        t_grid=[float(t) for t in t_grid],
        chi_values=values,
        provenance=["mc_estimate"] * len(values),
        stderr=errors,
        m2=params.m2,
        head_rule=mc_head(float(t_grid[0]), params, constants),
        tail_rule=TailRule(kind="cap", chi_cap=cap),
        chi_infinity=chi_inf,
        chi_infinity_stderr=chi_inf_err,
    )


class ProfileRegistry:
    """Registry for susceptibility profile sources."""

    _sources = {
        "gaussian": gaussian_profile,
        "skeleton": skeleton_profile,
        "mc": mc_profile,
    }

    @classmethod
    def register(cls, name: str, builder: Callable[..., SusceptibilityProfile]):
        """Register a new profile source."""
        cls._sources[name] = builder

    @classmethod
    def get(cls, name: str) -> Optional[Callable[..., SusceptibilityProfile]]:
        """Get a profile builder by name."""
        return cls._sources.get(name.lower())

    @classmethod
    def list_available(cls) -> List[str]:
        """List all available sources."""
        return list(cls._sources.keys())


def chi_profile(source: str, t_grid: Sequence[float], **kwargs) -> SusceptibilityProfile:
    """
    Assemble a susceptibility profile from a registered source.

    Args:
        source: gaussian, skeleton or mc
        t_grid: Positive increasing scale points
        **kwargs: Arguments of the source builder

    Raises:
        ConfigurationError: If the grid is empty or the source is unknown
    """
    if len(t_grid) == 0:
        raise ConfigurationError("grid: the scale grid is empty")
    builder = ProfileRegistry.get(source)
    if builder is None:
        raise ConfigurationError(
            f"grid.source: unknown profile source '{source}' (available: {', '.join(ProfileRegistry.list_available())})"
        )
    return builder(t_grid, **kwargs)


PROFILE_COLUMNS = ["t", "chi", "provenance", "stderr"]


def profile_table(profile: SusceptibilityProfile) -> Tuple[List[dict], List[str]]:
    """Rows of ``chi_profile.csv``; missing bounds and errors stay empty."""
    errors = profile.stderr or [None] * len(profile.t_grid)
    rows = [
        {"t": t, "chi": chi, "provenance": prov, "stderr": err}
        for t, chi, prov, err in zip(profile.t_grid, profile.chi_values, profile.provenance, errors)
    ]
    return rows, PROFILE_COLUMNS


def read_profile_csv(
    path: str,
    m2: float,
    chi_cap: Optional[float] = None,
    head_excess: Optional[float] = None,
) -> SusceptibilityProfile:
    """
    Read a profile written by ``profile_table``.

    Points without a provenance column count as ``input``. The tail is capped
    at ``chi_cap`` when given and left open otherwise. ``head_excess`` is a
    bound on D(t_0) below the first point; without it only an all-Gaussian
    file has a head rule.

    Raises:
        ShapeError: If the file lacks the t or chi column
    """
    frame = pd.read_csv(path)
    missing = [c for c in ("t", "chi") if c not in frame.columns]
    if missing:
        raise ShapeError(f"Profile file {path} lacks columns {missing}")
    frame = frame.sort_values("t")
    chi = [None if pd.isna(v) else float(v) for v in frame["chi"]]
    if "provenance" in frame.columns:
        provenance = [p if isinstance(p, str) else "input" for p in frame["provenance"]]
    else:
        provenance = ["input"] * len(frame)
    stderr = None
    if "stderr" in frame.columns and frame["stderr"].notna().all():
        stderr = frame["stderr"].astype(float).tolist()
    if head_excess is not None:
        head = HeadRule(kind="excess", method="user", excess_integral=head_excess)
    elif all(p == "gaussian_exact" for p in provenance):
        head = HeadRule(kind="gaussian")
    else:
        head = HeadRule()
    logger.info("Profile read", path=str(path), n_points=len(frame), head_rule=head.kind)
    return SusceptibilityProfile(
        t_grid=frame["t"].astype(float).tolist(),
        chi_values=chi,
        provenance=provenance,
        stderr=stderr,
        m2=m2,
        head_rule=head,
        tail_rule=TailRule(kind="cap", chi_cap=chi_cap) if chi_cap is not None else TailRule(),
    )
