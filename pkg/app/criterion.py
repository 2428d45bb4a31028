"""
Log-Sobolev criterion integrator.

For a susceptibility profile t -> chi_t the criterion gives

    1/gamma <= int_0^inf exp(-2 kappa_t) dt,   kappa_t = int_0^t (1/s - chi_s/s^2) ds.

Against the Gaussian reference chi^G_s = 1/(m^2 + 1/s) one has
kappa_t = log(m^2 t + 1) - D(t) with D(t) = int_0^t (chi_s - chi^G_s)/s^2 ds,
so the Gaussian part is integrated in closed form per cell and only D is
handled numerically (trapezoid in log t). Below the grid the profile's head
rule bounds D(t_0); beyond it the tail rule continues chi_t analytically.
"""

import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog
from numpy.polynomial.legendre import leggauss

from app.errors import DomainError, ShapeError
from app.lattice import LatticeSpec
from app.models import HeadRule, LsiBoundReport, SampleStream, SpectralGapReport, SusceptibilityProfile, TailRule
from app.services.sampling_service import SamplingService


logger = structlog.get_logger(__name__)

CELL_NODES = 4
CONSERVATIVE_SIGMAS = 3.0
OVERFLOW_LOG = 700.0
TRUNCATION_RTOL = 1e-6
HEAD_DECADES = 4
HEAD_POINTS_PER_DECADE = 200


def kappa_dot(t: float, chi_t: float) -> float:
    """kappa_dot_t = 1/t - chi_t / t^2."""
    if not t > 0:
        raise DomainError(f"t must be positive, got {t}")
    return 1.0 / t - chi_t / t**2


def _gaussian_cell(m2: float, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """int_a^b (m^2 t + 1)^{-2} dt."""
    return (1.0 / (m2 * a + 1.0) - 1.0 / (m2 * b + 1.0)) / m2


# ---------------------------------------------------------------------------
# head rules
# ---------------------------------------------------------------------------

def quadrature_head(
    excess_fn: Callable[[float], Optional[float]],
    t0: float,
    m2: float,
    points_per_decade: int = HEAD_POINTS_PER_DECADE,
    decades: int = HEAD_DECADES,
) -> HeadRule:
    """
    Head rule from a pointwise bound chi_s - chi^G_s <= excess_fn(s) on (0, t0].

    D(t0) is bracketed by the upper and lower Riemann sums of
    f(s) = excess_fn(s)/s in log s over ``decades`` decades below t0. Further
    down f is continued as a power law with the slope of the last decade,
    which must be positive.

    Returns:
        An ``excess`` rule, or an empty rule when excess_fn has no value
        somewhere, changes sign or does not decay towards s = 0
    """
    n = decades * points_per_decade
    s = t0 * np.logspace(-decades, 0.0, n + 1)
    values = [excess_fn(float(x)) for x in s]
    if any(v is None or not math.isfinite(v) for v in values):
        logger.warning("Head bound unavailable below the grid", t0=t0)
        return HeadRule()
    f = np.asarray(values, dtype=np.float64) / s
    if np.any(f < 0):
        logger.warning("Excess changes sign below the grid", t0=t0)
        return HeadRule()

    h = math.log(10.0) / points_per_decade
    upper = float(np.sum(np.maximum(f[:-1], f[1:]))) * h
    lower = float(np.sum(np.minimum(f[:-1], f[1:]))) * h
    f_min, f_decade = float(f[0]), float(f[points_per_decade])
    if f_min > 0:
        if f_decade <= f_min:
            logger.warning("Excess does not decay towards t = 0", t0=t0, f_min=f_min, f_decade=f_decade)
            return HeadRule()
        alpha = math.log(f_decade / f_min) / math.log(10.0)
        upper += f_min / alpha
    return HeadRule(kind="excess", method="quadrature", excess_integral=upper, excess_integral_lower=lower)


def brascamp_lieb_head(nu: float, m2: float, t0: float) -> HeadRule:
    """
    Head rule from chi_s <= 1/(1/s + nu) on (0, t0].

    Then D(t0) = log((1 + m^2 t0)/(1 + nu t0)) and the head of the criterion
    integral is t0 / (1 + nu t0), both exact. Empty when t0 lies beyond the
    range of the bound.
    """
    if not 0 < t0 <= 1.0 / (2.0 * abs(nu) + 1.0):
        return HeadRule()
    excess = math.log1p(m2 * t0) - math.log1p(nu * t0)
    return HeadRule(
        kind="excess",
        method="closed_form",
        excess_integral=excess,
        excess_integral_lower=excess,
        outer_integral=t0 / (1.0 + nu * t0),
    )


def _head_integral(head: HeadRule, t0: float, m2: float) -> Tuple[float, float]:
    """(lower, upper) bounds on int_0^{t_0} exp(-2 kappa_t) dt."""
    if head.outer_integral is not None:
        return head.outer_integral, head.outer_integral
    gauss = t0 / (m2 * t0 + 1.0)
    lower, upper = head.bounds
    return gauss * math.exp(2.0 * min(lower, 0.0)), gauss * math.exp(min(2.0 * max(upper, 0.0), OVERFLOW_LOG))


# ---------------------------------------------------------------------------
# criterion integral
# ---------------------------------------------------------------------------

def _excess_integral(t: np.ndarray, chi: np.ndarray, m2: float, head_excess: float) -> np.ndarray:
    """D(t_i) on the grid from D(t_0) = head_excess; trapezoid in log t."""
    excess = chi - 1.0 / (m2 + 1.0 / t)
    f = excess / t  # (chi - chi^G)/s^2 ds = f d(log s)
    du = np.diff(np.log(t))
    cells = 0.5 * (f[:-1] + f[1:]) * du
    return head_excess + np.concatenate([[0.0], np.cumsum(cells)])


def kappa_path(profile: SusceptibilityProfile) -> Tuple[np.ndarray, np.ndarray]:
    """
    Lower bound on kappa_t on the profile grid.

    Raises:
        DomainError: If the profile has points without a value or no head rule
    """
    if any(c is None for c in profile.chi_values):
        raise DomainError("profile has grid points without a susceptibility value")
    if profile.head_rule.kind == "none":
        raise DomainError("profile has no head rule below the grid")
    t = np.asarray(profile.t_grid, dtype=np.float64)
    chi = np.asarray(profile.chi_values, dtype=np.float64)
    _, upper = profile.head_rule.bounds
    return t, np.log(profile.m2 * t + 1.0) - _excess_integral(t, chi, profile.m2, upper)


def _body_integral(t: np.ndarray, excess: np.ndarray, m2: float) -> float:
    """
    int_{t_0}^{t_N} exp(2 D(t)) (m^2 t + 1)^{-2} dt with D linear in log t per cell.

    Each cell is the exact Gaussian integral times the Gauss-Legendre average
    of exp(2 D) under the Gaussian weight.
    """
    if t.size < 2:
        return 0.0
    u = np.log(t)
    nodes, weights = leggauss(CELL_NODES)
    half = 0.5 * np.diff(u)
    mid = 0.5 * (u[:-1] + u[1:])
    un = mid[:, None] + half[:, None] * nodes[None, :]
    frac = (nodes[None, :] + 1.0) / 2.0
    dn = excess[:-1, None] + frac * np.diff(excess)[:, None]
    tn = np.exp(un)
    gauss = tn / (m2 * tn + 1.0) ** 2
    top = float(np.max(2.0 * dn))
    if top > OVERFLOW_LOG:
        return math.inf
    average = np.sum(weights * gauss * np.exp(2.0 * dn), axis=1) / np.sum(weights * gauss, axis=1)
    return float(np.sum(_gaussian_cell(m2, t[:-1], t[1:]) * average))


def _tail_integral(tail: TailRule, t_last: float, kappa_last: float, excess_last: float, m2: float) -> Optional[float]:
    """Analytic continuation beyond the grid; None when no rule bounds it."""
    if tail.kind == "gaussian":
        return math.exp(2.0 * excess_last) / (m2 * (m2 * t_last + 1.0))
    if tail.kind == "cap":
        # kappa_t >= kappa_N + log(t/t_N) + chi_cap (1/t - 1/t_N)
        cap = tail.chi_cap
        exponent = 2.0 * cap / t_last
        if exponent - 2.0 * kappa_last > OVERFLOW_LOG:
            return math.inf
        return math.exp(-2.0 * kappa_last) * t_last**2 * math.expm1(exponent) / (2.0 * cap)
    return None


def _criterion_integral(
    t: np.ndarray,
    chi: np.ndarray,
    m2: float,
    head: HeadRule,
    tail: TailRule,
) -> Tuple[Optional[float], Dict[str, object]]:
    d_lower, d_upper = head.bounds if head.kind != "none" else (0.0, 0.0)
    excess = _excess_integral(t, chi, m2, d_upper)
    kappa = np.log(m2 * t + 1.0) - excess
    body = _body_integral(t, excess, m2)
    tail_value = _tail_integral(tail, float(t[-1]), float(kappa[-1]), float(excess[-1]), m2)

    diagnostics: Dict[str, object] = {
        "body": body,
        "tail": tail_value,
        "head_rule": head.kind,
        "tail_rule": tail.kind,
        "n_points": int(t.size),
        "kappa_last": float(kappa[-1]),
    }
    nonpositive = np.nonzero(chi >= t)[0]
    if nonpositive.size:
        diagnostics["first_nonpositive_kappa_dot_t"] = float(t[nonpositive[0]])
        diagnostics["divergence_decade"] = int(math.floor(math.log10(t[nonpositive[0]])))

    if tail_value is None:
        diagnostics["reason"] = "no tail rule beyond the grid"
        return None, diagnostics
    if head.kind == "none":
        diagnostics["reason"] = "no head rule below the grid"
        return None, diagnostics
    head_lower, head_upper = _head_integral(head, float(t[0]), m2)
    diagnostics["head"] = head_upper
    total = head_upper + body + tail_value
    if not math.isfinite(total):
        diagnostics["reason"] = "criterion integral diverges"
        return None, diagnostics

    # the tail pieces are closed forms of their rule; the head is bracketed
    total_lower = head_lower + (body + tail_value) * math.exp(-2.0 * (d_upper - d_lower))
    truncation = (total - total_lower) / total
    diagnostics.update(
        head_excess=[d_lower, d_upper],
        head_fraction=head_upper / total,
        tail_fraction=tail_value / total,
        truncation_error=truncation,
    )
    if truncation > TRUNCATION_RTOL:
        diagnostics["reason"] = "head truncation error above tolerance"
        return None, diagnostics
    return total, diagnostics


def lsi_lower_bound(profile: SusceptibilityProfile) -> LsiBoundReport:
    """
    Lower bound on the log-Sobolev constant from a susceptibility profile.

    A profile with uncovered grid points, no head or tail rule, a numerically
    divergent integral or a head bracket wider than ``TRUNCATION_RTOL`` of
    the integral yields gamma_lower = None with diagnostics. When the
    profile carries stderr a conservative variant uses chi + 3 stderr.
    """
    provenance = list(profile.provenance)
    digest = profile.digest()
    gamma_upper = gamma_upper_stderr = None
    if profile.chi_infinity is not None:
        gamma_upper = 1.0 / profile.chi_infinity
        if profile.chi_infinity_stderr is not None:
            gamma_upper_stderr = profile.chi_infinity_stderr / profile.chi_infinity**2

    missing = [t for t, c in zip(profile.t_grid, profile.chi_values) if c is None]
    if missing:
        logger.warning("Profile not covered; no criterion bound", first_missing_t=missing[0], n_missing=len(missing))
        return LsiBoundReport(
            gamma_upper=gamma_upper,
            gamma_upper_stderr=gamma_upper_stderr,
            profile_provenance=provenance,
            profile_digest=digest,
            diagnostics={"reason": "profile has grid points without a bound", "first_missing_t": missing[0]},
        )

    t = np.asarray(profile.t_grid, dtype=np.float64)
    chi = np.asarray(profile.chi_values, dtype=np.float64)
    head, tail = profile.head_rule, profile.tail_rule
    integral, diagnostics = _criterion_integral(t, chi, profile.m2, head, tail)

    if integral is not None and t.size >= 5:
        coarse, _ = _criterion_integral(t[::2], chi[::2], profile.m2, head, tail)
        if coarse is not None:
            diagnostics["coarse_grid_change"] = abs(coarse - integral) / integral

    conservative = None
    if profile.stderr is not None:
        inflated = chi + CONSERVATIVE_SIGMAS * np.asarray(profile.stderr, dtype=np.float64)
        inflated_integral, _ = _criterion_integral(t, inflated, profile.m2, head, tail)
        if inflated_integral is not None:
            conservative = 1.0 / inflated_integral

    gamma_lower = None if integral is None else 1.0 / integral
    report = LsiBoundReport(
        gamma_lower=gamma_lower,
        gamma_lower_conservative=conservative,
        kappa_integral=integral,
        gamma_upper=gamma_upper,
        gamma_upper_stderr=gamma_upper_stderr,
        profile_provenance=provenance,
        profile_digest=digest,
        diagnostics=diagnostics,
    )
    if gamma_lower is None:
        logger.warning("Criterion integral not bounded", **{k: v for k, v in diagnostics.items() if k != "tail_rule"})
    else:
        logger.info("Criterion bound computed", gamma_lower=gamma_lower, kappa_integral=integral)
    if not report.ordered:
        logger.warning("Lower bound exceeds the spectral-gap upper bound", gamma_lower=gamma_lower, gamma_upper=gamma_upper)
    return report


# ---------------------------------------------------------------------------
# lattice phi^4 closed form
# ---------------------------------------------------------------------------

def lattice_phi4_bound(g: float, nu: float, chi: float) -> float:
    """
    Closed-form bound on 1/gamma for the unit-spacing lattice model:

        e^2 / (2|nu| + 1) + (2|nu| + 1)^3 exp(2 + 2 (2|nu| + 1) chi)
    """
    if g < 0:
        raise DomainError(f"g must be non-negative, got {g}")
    if not chi > 0:
        raise DomainError(f"chi must be positive, got {chi}")
    k = 2.0 * abs(nu) + 1.0
    return math.e**2 / k + k**3 * math.exp(2.0 + 2.0 * k * chi)


def brascamp_lieb_chi_bound(t: float, nu: float) -> float:
    """
    chi_t <= 1 / (1/t + nu) for t <= 1 / (2|nu| + 1).

    Raises:
        DomainError: Outside that range
    """
    if not 0 < t <= 1.0 / (2.0 * abs(nu) + 1.0):
        raise DomainError(f"Brascamp-Lieb step needs 0 < t <= 1/(2|nu|+1), got t={t}, nu={nu}")
    return 1.0 / (1.0 / t + nu)


def lattice_phi4_profile(nu: float, chi: float, t_grid: Sequence[float], m2: float = 1.0) -> SusceptibilityProfile:
    """
    Brascamp-Lieb bound for small t, Griffiths cap chi_t <= chi beyond. The
    head below the grid follows the Brascamp-Lieb bound in closed form.

    Its criterion integral never exceeds ``lattice_phi4_bound``.
    """
    t_star = 1.0 / (2.0 * abs(nu) + 1.0)
    values: List[float] = []
    provenance: List[str] = []
    for t in t_grid:
        if t <= t_star:
            bl = brascamp_lieb_chi_bound(float(t), nu)
            values.append(min(bl, chi))
            provenance.append("brascamp_lieb" if bl <= chi else "griffiths_cap")
        else:
            values.append(chi)
            provenance.append("griffiths_cap")
    return SusceptibilityProfile(
        t_grid=[float(t) for t in t_grid],
        chi_values=values,
        provenance=provenance,
        m2=m2,
        head_rule=brascamp_lieb_head(nu, m2, float(t_grid[0])),
        tail_rule=TailRule(kind="cap", chi_cap=chi),
    )


# ---------------------------------------------------------------------------
# spectral gap
# ---------------------------------------------------------------------------

def trial_dirichlet_form(spec: Optional[LatticeSpec]) -> float:
    """D(F) for F = eps^d L^{-d/2} sum_x phi_x: eps^{-d} sum_x (eps^d L^{-d/2})^2 = 1."""
    if spec is None:
        return 1.0
    w = spec.volume_weight
    return spec.n_sites * (w * spec.L ** (-spec.d / 2.0)) ** 2 / w


def spectral_gap_upper(
    chi: float,
    chi_stderr: Optional[float] = None,
    stream: Optional[SampleStream] = None,
) -> SpectralGapReport:
    """
    gamma <= 1/chi from the linear trial function.

    With a sample stream var(F) is estimated by batch means and compared to chi.

    Raises:
        DomainError: If chi is not positive
        ShapeError: If the stream has no lattice
    """
    if not chi > 0:
        raise DomainError(f"chi must be positive, got {chi}")
    var_f = var_err = consistent = None
    spec = None
    if stream is not None:
        spec = stream.spec
        if spec is None:
            raise ShapeError("trial-function check needs the lattice of the stream")
        samples = stream.samples
        f = spec.volume_weight * spec.L ** (-spec.d / 2.0) * samples.sum(axis=-1)
        centred = (f - f.mean()) ** 2
        batches = SamplingService.batch_means(centred, stream.config.n_batches)
        var_f = float(batches.mean())
        var_err = float(batches.std(ddof=1) / math.sqrt(batches.size))
        consistent = abs(var_f - chi) <= CONSERVATIVE_SIGMAS * math.hypot(var_err, chi_stderr or 0.0)
        if not consistent:
            logger.warning("var(F) and chi disagree", var_f=var_f, chi=chi)
    return SpectralGapReport(
        gamma_upper=1.0 / chi,
        chi=chi,
        chi_stderr=chi_stderr,
        var_f=var_f,
        var_f_stderr=var_err,
        dirichlet_form=trial_dirichlet_form(spec),
        var_consistent=consistent,
    )
