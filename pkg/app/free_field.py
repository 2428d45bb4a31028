"""
Free-field covariances C_t = (-Delta + m^2 + 1/t)^{-1}, the mass counterterm
a^eps(lambda, m^2) and the gaps eta_t, gamma_t between scale t and t = inf.

Kernels are built in Fourier space from the multipliers 1/(m^2_t + theta(k))
and transformed back once; every quantity derived from them is an exact
lattice sum.
"""

import math
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import structlog
from pydantic import Field, field_serializer

from app.errors import ConfigurationError, DomainError, ShapeError
from app.lattice import LatticeSpec, build_lattice, real_multiplier_to_field
from app.models import (
    ArrayModel,
    CountertermReport,
    CountertermScaling,
    CovarianceMoments,
    MassSchedule,
    ShapeFit,
)


logger = structlog.get_logger(__name__)


class CovarianceKernel(ArrayModel):
    """Translation-invariant kernel C_t(x) with its Fourier multipliers."""
    spec: LatticeSpec
    schedule: MassSchedule
    values: np.ndarray = Field(..., description="C_t(x) on the lattice")
    fourier: np.ndarray = Field(..., description="1 / (m^2_t + theta(k)) on the FFT grid")

    @property
    def origin(self) -> float:
        return float(self.values[(0,) * self.spec.d])

    @property
    def mass(self) -> float:
        """m_t = sqrt(m^2_t)."""
        return math.sqrt(self.schedule.m2_t)

    @field_serializer("values", "fourier")
    def _arrays(self, value):
        return np.asarray(value).tolist()


def mass_schedule(m2: float, t: Optional[float] = None) -> MassSchedule:
    """Schedule with ``t = None`` meaning t = inf."""
    if not m2 > 0:
        raise ConfigurationError(f"m2 must be positive, got {m2}")
    if t is None:
        return MassSchedule(m2=m2)
    if not t > 0:
        raise ConfigurationError(f"t must be positive, got {t}")
    return MassSchedule(m2=m2, t=t)


def covariance(spec: LatticeSpec, schedule: MassSchedule) -> CovarianceKernel:
    """
    Build C_t(x) = L^{-d} sum_k exp(ik.x) / (m^2_t + theta(k)).

    Args:
        spec: Lattice geometry
        schedule: Mass and scale

    Returns:
        CovarianceKernel with real-space values and Fourier multipliers
    """
    multiplier = 1.0 / (schedule.m2_t + spec.theta)
    values = real_multiplier_to_field(multiplier, spec)
    values.setflags(write=False)
    multiplier.setflags(write=False)
    return CovarianceKernel(spec=spec, schedule=schedule, values=values, fourier=multiplier)


def covariance_moments(kernel: CovarianceKernel) -> CovarianceMoments:
    """Exact lattice sums ||C||_1, ||C||_2^2 = ||C^2||_1 and ||C^3||_1."""
    w = kernel.spec.volume_weight
    c = kernel.values
    l2_sq = float(w * np.sum(c * c))
    return CovarianceMoments(
        c_origin=kernel.origin,
        l1=float(w * np.sum(np.abs(c))),
        l2_sq=l2_sq,
        c2_l1=l2_sq,
        c3_l1=float(w * np.sum(np.abs(c) ** 3)),
    )


def covariance_matrix(kernel: CovarianceKernel) -> np.ndarray:
    """
    Dense matrix C(x - y) over row-major sites.

    This is the covariance of phi under exp(-1/2 eps^d (phi, (-Delta + m^2_t) phi)).
    """
    spec = kernel.spec
    coords = spec.coordinates()
    diff = (coords[:, None, :] - coords[None, :, :]) % spec.n_per_side
    return kernel.values[tuple(diff[..., a] for a in range(spec.d))]


def _kernel_gap(spec: LatticeSpec, m2: float, t: float) -> np.ndarray:
    """C_inf - C_t, from the difference of multipliers (no cancellation)."""
    inverse_t = 1.0 / t
    multiplier = inverse_t / ((m2 + spec.theta) * (m2 + inverse_t + spec.theta))
    return real_multiplier_to_field(multiplier, spec)


def counterterm(spec: LatticeSpec, lambda_: float, m2: float, t: Optional[float] = None) -> CountertermReport:
    """
    a^eps(lambda, m^2) = -3 lambda C_inf(0) + 6 lambda^2 ||C_inf||_{L^3}^3.

    The lambda^2 term is kept in both dimensions. When ``t`` is given the
    report also carries the gaps eta_t and gamma_t.

    Raises:
        ConfigurationError: If lambda < 0 or m2 <= 0
    """
    if lambda_ < 0:
        raise ConfigurationError(f"lambda must be non-negative, got {lambda_}")
    kernel = covariance(spec, mass_schedule(m2))
    moments = covariance_moments(kernel)
    tadpole = moments.c_origin
    sunset = moments.c3_l1
    a_eps = -3.0 * lambda_ * tadpole + 6.0 * lambda_**2 * sunset

    eta_t = gamma_t = None
    if t is not None:
        eta_t, gamma_t = counterterm_gaps(spec, m2, t)

    return CountertermReport(
        a_eps=a_eps, tadpole=tadpole, sunset=sunset, lambda_=lambda_, m2=m2, eta_t=eta_t, gamma_t=gamma_t
    )


def counterterm_gaps(spec: LatticeSpec, m2: float, t: float) -> Tuple[float, float]:
    """
    eta_t = C_inf(0) - C_t(0) and gamma_t = ||C_inf^3||_1 - ||C_t^3||_1.

    Both are evaluated from the kernel difference, so they stay accurate for
    large t; t = inf returns (0, 0).

    Raises:
        DomainError: If t <= 0
    """
    if not t > 0:
        raise DomainError(f"t must be positive, got {t}")
    if math.isinf(t):
        return 0.0, 0.0
    c_inf = covariance(spec, mass_schedule(m2)).values
    gap = _kernel_gap(spec, m2, t)
    c_t = c_inf - gap
    eta = float(gap[(0,) * spec.d])
    # a^3 - b^3 = (a - b)(a^2 + ab + b^2)
    gamma = float(spec.volume_weight * np.sum(gap * (c_inf**2 + c_inf * c_t + c_t**2)))
    return max(eta, 0.0), max(gamma, 0.0)


def counterterm_scaling(
    d: int,
    lambda_: float,
    m2: float,
    L: float,
    eps_values: Sequence[float],
) -> CountertermScaling:
    """
    Fit a^eps against its divergent basis over a sweep of spacings.

    d = 2: a ~ b0 - c1 lambda log(eps^-2)
    d = 3: a ~ b0 - c1 lambda eps^-1 + c2 lambda^2 log(eps^-2)

    Raises:
        DomainError: If lambda <= 0 or fewer points than basis functions are given
    """
    if not lambda_ > 0:
        raise DomainError("counterterm scaling needs lambda > 0")
    eps = np.asarray(sorted(eps_values, reverse=True), dtype=np.float64)
    log_term = np.log(eps**-2)
    if d == 2:
        basis_names = ["1", "log(eps^-2)"]
        design = np.column_stack([np.ones_like(eps), log_term])
    else:
        basis_names = ["1", "eps^-1", "log(eps^-2)"]
        design = np.column_stack([np.ones_like(eps), 1.0 / eps, log_term])
    if eps.size < design.shape[1]:
        raise DomainError(f"need at least {design.shape[1]} spacings, got {eps.size}")

    a_values = []
    for e in eps:
        report = counterterm(build_lattice(d, float(e), L), lambda_, m2)
        a_values.append(report.a_eps)
        logger.debug("Counterterm evaluated", d=d, eps=float(e), a_eps=report.a_eps)
    a = np.asarray(a_values)
    coefficients, *_ = np.linalg.lstsq(design, a, rcond=None)
    residuals = a - design @ coefficients

    if d == 2:
        c1, c2 = -coefficients[1] / lambda_, None
    else:
        c1, c2 = -coefficients[1] / lambda_, float(coefficients[2] / lambda_**2)

    logger.info("Counterterm scaling fitted", d=d, c1=float(c1), c2=c2, max_residual=float(np.max(np.abs(residuals))))
    return CountertermScaling(
        d=d,
        L=L,
        lambda_=lambda_,
        m2=m2,
        eps_values=eps.tolist(),
        a_values=a.tolist(),
        basis=basis_names,
        coefficients=coefficients.tolist(),
        c1=float(c1),
        c2=c2,
        residuals=residuals.tolist(),
        max_abs_residual=float(np.max(np.abs(residuals))),
    )


# ---------------------------------------------------------------------------
# bound shapes (constant factor omitted)
# ---------------------------------------------------------------------------

def _check_dimension(d: int) -> None:
    if d not in (2, 3):
        raise DomainError(f"bound shapes exist for d in (2, 3), got {d}")


def eta_shape(d: int, m2: float, t: float) -> float:
    """eta_t <= c log(1 + 1/(m^2 t)) in d=2, c m (sqrt(1 + 1/(t m^2)) - 1) in d=3."""
    _check_dimension(d)
    if math.isinf(t):
        return 0.0
    if d == 2:
        return math.log1p(1.0 / (m2 * t))
    return math.sqrt(m2) * (math.sqrt(1.0 + 1.0 / (t * m2)) - 1.0)


def gamma_shape(d: int, m2: float, t: float) -> float:
    """gamma_t <= c / (m^2 (m^2 t + 1)) in d=2, c log(1 + 1/(m^2 t)) in d=3."""
    _check_dimension(d)
    if math.isinf(t):
        return 0.0
    if d == 2:
        return 1.0 / (m2 * (m2 * t + 1.0))
    return math.log1p(1.0 / (m2 * t))


def c2_shape(d: int, m: float) -> float:
    """||C^2||_1 <= c / m^2 in d=2, c / m in d=3 (m the kernel mass)."""
    _check_dimension(d)
    return m**-2 if d == 2 else 1.0 / m


def c_psi_l1_shape(d: int, m: float) -> float:
    """||C * psi||_1 <= c / m^4 in d=2, c (m^{-1/2} + m^{-5/2}) in d=3."""
    _check_dimension(d)
    return m**-4 if d == 2 else m**-0.5 + m**-2.5


def c_psi_l2_shape(d: int, m: float) -> float:
    """||C * psi||_2 <= c / m^3 in d=2, c / m^{1/2} in d=3."""
    _check_dimension(d)
    return m**-3 if d == 2 else m**-0.5


def bubble5_shape(d: int, m: float) -> float:
    """||C (C^2 * C^2)||_1 <= c / m^4 in d=2, c / m in d=3."""
    _check_dimension(d)
    return m**-4 if d == 2 else 1.0 / m


def fit_bound_constant(
    name: str,
    values: Iterable[float],
    shapes: Iterable[float],
    groups: Optional[Iterable[str]] = None,
    tolerance: float = 0.2,
) -> ShapeFit:
    """
    Fit one constant c with value <= c * shape at every point.

    Points with a zero shape must carry a zero value and are skipped. When
    ``groups`` labels the points (e.g. by lattice spacing), the constant is
    also fitted per group and the spread between groups is reported.

    Raises:
        ShapeError: If the sequences differ in length
        DomainError: If a zero-shape point carries a non-zero value
    """
    values = np.asarray(list(values), dtype=np.float64)
    shapes = np.asarray(list(shapes), dtype=np.float64)
    labels = list(groups) if groups is not None else ["all"] * values.size
    if values.shape != shapes.shape or len(labels) != values.size:
        raise ShapeError("values, shapes and groups must have equal length")

    zero = shapes == 0
    if np.any(np.abs(values[zero]) > 1e-14):
        raise DomainError(f"{name}: non-zero value where the bound shape vanishes")
    keep = ~zero
    ratios = values[keep] / shapes[keep]
    kept_labels = [label for label, k in zip(labels, keep) if k]
    if ratios.size == 0:
        return ShapeFit(name=name, constant=0.0, group_constants={}, spread=0.0, tolerance=tolerance, n_points=0)

    group_constants: Dict[str, float] = {}
    for label, ratio in zip(kept_labels, ratios):
        group_constants[label] = max(group_constants.get(label, -math.inf), float(ratio))
    high, low = max(group_constants.values()), min(group_constants.values())
    spread = (high - low) / (high + low) if high + low > 0 else 0.0

    fit = ShapeFit(
        name=name,
        constant=float(np.max(ratios)),
        group_constants=group_constants,
        spread=float(spread),
        tolerance=tolerance,
        n_points=int(ratios.size),
    )
    if not fit.stable:
        logger.warning("Bound constant not stable across groups", name=name, spread=fit.spread, groups=group_constants)
    return fit


def shape_sweep(
    d: int,
    L: float,
    eps_values: Sequence[float],
    m2: float,
    t_values: Sequence[float],
) -> List[ShapeFit]:
    """
    Fit the eta_t and gamma_t bound shapes over a (eps, t) grid.

    Returns:
        [eta fit, gamma fit], grouped by spacing
    """
    eta_vals, eta_shapes, gamma_vals, gamma_shapes, labels = [], [], [], [], []
    for eps in eps_values:
        spec = build_lattice(d, eps, L)
        for t in t_values:
            eta, gamma = counterterm_gaps(spec, m2, t)
            eta_vals.append(eta)
            gamma_vals.append(gamma)
            eta_shapes.append(eta_shape(d, m2, t))
            gamma_shapes.append(gamma_shape(d, m2, t))
            labels.append(f"eps={eps:g}")
    return [
        fit_bound_constant("eta_t", eta_vals, eta_shapes, labels),
        fit_bound_constant("gamma_t", gamma_vals, gamma_shapes, labels),
    ]
