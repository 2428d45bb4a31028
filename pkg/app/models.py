"""
Data models for the phi4-lsi toolkit.

Parameter records, estimates and reports shared by the numerical modules.
Array-valued fields hold numpy arrays; ``model_dump(mode="json")`` turns them
into nested lists.
"""

import math
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, Field, field_serializer, field_validator, model_validator

from app.lattice import LatticeSpec


class ArrayModel(BaseModel):
    """Base for frozen models that carry numpy arrays."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)


def _serialize_array(value):
    if value is None:
        return None
    if sp.issparse(value):
        value = value.toarray()
    return np.asarray(value).tolist()


# ---------------------------------------------------------------------------
# free field
# ---------------------------------------------------------------------------

class MassSchedule(BaseModel):
    """Base mass m^2 and scale t; t = inf is the unshifted covariance."""
    model_config = ConfigDict(frozen=True)

    m2: float = Field(..., gt=0, description="Base mass squared")
    t: float = Field(default=math.inf, gt=0, description="Scale parameter in (0, inf]")

    @property
    def inverse_t(self) -> float:
        return 0.0 if math.isinf(self.t) else 1.0 / self.t

    @property
    def m2_t(self) -> float:
        return self.m2 + self.inverse_t


class CovarianceMoments(BaseModel):
    """Exact lattice sums of a covariance kernel."""
    c_origin: float = Field(..., description="C(0)")
    l1: float = Field(..., description="||C||_{L^1}")
    l2_sq: float = Field(..., description="||C||_{L^2}^2")
    c2_l1: float = Field(..., description="||C^2||_{L^1}")
    c3_l1: float = Field(..., description="||C^3||_{L^1}")


class CountertermReport(BaseModel):
    """Counterterm a^eps(lambda, m^2) and, when a scale is given, the gaps at t."""
    a_eps: float
    tadpole: float = Field(..., description="C_inf(0)")
    sunset: float = Field(..., description="||C_inf||_{L^3}^3")
    lambda_: float = Field(..., alias="lambda")
    m2: float
    eta_t: Optional[float] = Field(default=None, ge=0)
    gamma_t: Optional[float] = Field(default=None, ge=0)

    model_config = ConfigDict(populate_by_name=True)


class CountertermScaling(BaseModel):
    """Least-squares fit of a^eps against the divergent basis of its dimension."""
    d: int
    L: float
    lambda_: float = Field(..., alias="lambda")
    m2: float
    eps_values: List[float]
    a_values: List[float]
    basis: List[str]
    coefficients: List[float]
    c1: float = Field(..., description="Leading divergence coefficient per unit lambda")
    c2: Optional[float] = Field(default=None, description="log-divergence coefficient per unit lambda^2 (d=3)")
    residuals: List[float]
    max_abs_residual: float

    model_config = ConfigDict(populate_by_name=True)


class ShapeFit(BaseModel):
    """One constant fitted to values <= c * shape, with per-group stability."""
    name: str
    constant: float = Field(..., description="max over all points of value / shape")
    group_constants: Dict[str, float] = Field(default_factory=dict)
    spread: float = Field(..., description="(max - min) / (max + min) of the group constants")
    tolerance: float = 0.2
    n_points: int

    @property
    def stable(self) -> bool:
        return self.spread <= self.tolerance


# ---------------------------------------------------------------------------
# sampler
# ---------------------------------------------------------------------------

class GeneralModel(ArrayModel):
    """
    phi^4 measure  exp(-1/2 (phi, A phi) - sum_x (g/4 phi_x^4 + nu/2 phi_x^2) + (h, phi)).

    ``A`` may be dense or scipy-sparse; dense validation (symmetry, positive
    definiteness, non-positive off-diagonal) is done for small matrices and a
    diagonal-dominance test for large sparse ones.
    """
    A: object = Field(..., description="Symmetric positive definite coupling matrix")
    g: float = Field(..., ge=0, description="Quartic coupling")
    nu: float = Field(default=0.0, description="Quadratic coefficient")
    h: Optional[np.ndarray] = Field(default=None, description="External field")

    @model_validator(mode="after")
    def _check(self) -> "GeneralModel":
        A = self.A
        if sp.issparse(A):
            n = A.shape[0]
            if A.shape != (n, n):
                raise ValueError("A must be square")
            if abs(A - A.T).max() > 1e-12 * max(1.0, abs(A).max()):
                raise ValueError("A must be symmetric")
            off = A - sp.diags(A.diagonal())
            if off.nnz and off.max() > 0:
                raise ValueError("A must have non-positive off-diagonal entries")
            diag = A.diagonal()
            row_off = np.asarray(abs(off).sum(axis=1)).ravel()
            if np.any(diag - row_off <= 0):
                raise ValueError("sparse A must be strictly diagonally dominant")
        else:
            A = np.asarray(A, dtype=np.float64)
            object.__setattr__(self, "A", A)
            if A.ndim != 2 or A.shape[0] != A.shape[1]:
                raise ValueError("A must be square")
            if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max())):
                raise ValueError("A must be symmetric")
            off = A - np.diag(np.diag(A))
            if np.any(off > 0):
                raise ValueError("A must have non-positive off-diagonal entries")
            if np.linalg.eigvalsh(A).min() <= 0:
                raise ValueError("A must be positive definite")
        n = A.shape[0]
        if self.h is not None:
            h = np.asarray(self.h, dtype=np.float64).reshape(-1)
            if h.size != n:
                raise ValueError(f"h has {h.size} entries, A has {n} rows")
            object.__setattr__(self, "h", h)
        return self

    @property
    def n_sites(self) -> int:
        return self.A.shape[0]

    @property
    def field_h(self) -> np.ndarray:
        return np.zeros(self.n_sites) if self.h is None else self.h

    def dense_A(self) -> np.ndarray:
        return self.A.toarray() if sp.issparse(self.A) else self.A

    def with_changes(self, **changes) -> "GeneralModel":
        data = {"A": self.A, "g": self.g, "nu": self.nu, "h": self.h}
        data.update(changes)
        return GeneralModel(**data)

    def action(self, phi: np.ndarray) -> np.ndarray:
        """Action for configurations ``phi`` of shape (..., n_sites)."""
        phi = np.asarray(phi, dtype=np.float64)
        if sp.issparse(self.A):
            flat = phi.reshape(-1, self.n_sites)
            quad = np.einsum("ij,ij->i", flat, (self.A @ flat.T).T).reshape(phi.shape[:-1])
        else:
            quad = np.einsum("...i,ij,...j->...", phi, self.A, phi)
        local = np.sum(0.25 * self.g * phi**4 + 0.5 * self.nu * phi**2, axis=-1)
        return 0.5 * quad + local - phi @ self.field_h

    @field_serializer("A", "h")
    def _arrays(self, value):
        return _serialize_array(value)


class Phi4Params(ArrayModel):
    """Parameters of the regularised phi^4 measure on a lattice."""
    spec: LatticeSpec
    lambda_: float = Field(..., ge=0, alias="lambda", description="Quartic coupling")
    mu: float = Field(..., description="Mass term (any sign)")
    m2: float = Field(default=1.0, gt=0, description="Counterterm mass squared")
    t: float = Field(default=math.inf, gt=0, description="Scale; mass shift 1/t")
    normalisation: Literal["continuum", "lattice_section3"] = Field(default="continuum")
    h: Optional[np.ndarray] = Field(default=None, description="External field, row-major")

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True, populate_by_name=True)

    @model_validator(mode="after")
    def _check(self) -> "Phi4Params":
        if self.normalisation == "lattice_section3" and not math.isclose(self.spec.eps, 1.0):
            raise ValueError("lattice_section3 normalisation uses unit spacing (eps = 1)")
        if self.h is not None:
            h = np.asarray(self.h, dtype=np.float64).reshape(-1)
            if h.size != self.spec.n_sites:
                raise ValueError(f"h has {h.size} entries, lattice has {self.spec.n_sites} sites")
            object.__setattr__(self, "h", h)
        return self

    @property
    def inverse_t(self) -> float:
        return 0.0 if math.isinf(self.t) else 1.0 / self.t

    def with_changes(self, **changes) -> "Phi4Params":
        data = self.model_dump(by_alias=True, exclude={"spec", "h"})
        data.update(spec=self.spec, h=self.h)
        data.update(changes)
        return Phi4Params(**data)

    @field_serializer("h")
    def _arrays(self, value):
        return _serialize_array(value)


class ChainConfig(BaseModel):
    """How a Markov chain is run."""
    model_config = ConfigDict(frozen=True)

    scheme: Literal["metropolis_site", "heatbath_site", "langevin_euler"] = "metropolis_site"
    step_dt: float = Field(default=0.01, gt=0)
    n_burn: int = Field(default=1000, ge=0)
    n_keep: int = Field(default=10000, ge=1)
    thin: int = Field(default=1, ge=1)
    n_chains: int = Field(default=4, ge=1)
    seed: int = Field(default=0, ge=0, lt=2**64)
    proposal_width: float = Field(default=1.0, gt=0)
    target_acceptance: Tuple[float, float] = (0.3, 0.5)
    n_batches: int = Field(default=20, ge=2)
    max_burn_factor: int = Field(default=10, ge=1, description="Burn-in cap as a multiple of n_burn")
    max_step_halvings: int = Field(default=4, ge=0, description="Langevin step halvings on divergence")


class ChainResult(ArrayModel):
    """Output of one chain."""
    chain: int
    samples: np.ndarray = Field(..., description="(n_keep, n_sites)")
    actions: np.ndarray = Field(..., description="(n_keep,)")
    acceptance: float
    proposal_width: Optional[float] = None
    step_dt: Optional[float] = None
    burn_in_sweeps: int
    burn_in_converged: bool


class SampleStream(ArrayModel):
    """Samples of all chains, in chain order."""
    spec: Optional[LatticeSpec] = None
    model: GeneralModel
    config: ChainConfig
    chains: List[ChainResult]
    volume_weight: float = Field(default=1.0, description="eps^d for continuum runs, 1 otherwise")

    @property
    def samples(self) -> np.ndarray:
        """(n_chains, n_keep, n_sites)"""
        return np.stack([c.samples for c in self.chains])

    @property
    def n_samples(self) -> int:
        return sum(c.samples.shape[0] for c in self.chains)


class CorrelationEstimate(ArrayModel):
    """Translation-averaged two-point function with batch-means errors."""
    spec: LatticeSpec
    s_hat: np.ndarray
    stderr: np.ndarray
    chi_hat: float
    chi_stderr: float
    ess: float
    volume_weight: float = Field(..., description="Weight used in chi_hat = w * sum s_hat")
    batch_means: Optional[np.ndarray] = Field(default=None, description="(n_batches, *shape)")
    warnings: List[str] = Field(default_factory=list)

    @field_serializer("s_hat", "stderr", "batch_means")
    def _arrays(self, value):
        return _serialize_array(value)


class MomentEstimate(ArrayModel):
    """Site-resolved moments of a sample stream (any general model)."""
    mean: np.ndarray
    mean_stderr: np.ndarray
    second: np.ndarray = Field(..., description="<phi_x phi_y>")
    second_stderr: np.ndarray
    n_samples: int

    @property
    def truncated(self) -> np.ndarray:
        return self.second - np.outer(self.mean, self.mean)

    @field_serializer("mean", "mean_stderr", "second", "second_stderr")
    def _arrays(self, value):
        return _serialize_array(value)


class StepHalvingReport(BaseModel):
    """Langevin bias control: site-averaged <phi^2> at dt and dt/2 with a Richardson value."""
    step_dt: float
    second_moment: float
    second_moment_stderr: float
    half_step_second_moment: float
    half_step_second_moment_stderr: float
    extrapolated: float = Field(..., description="2 x (dt/2 value) - (dt value)")
    extrapolated_stderr: float
    converged: bool = Field(..., description="dt and dt/2 agree within 3 joint stderr")


# ---------------------------------------------------------------------------
# oracle
# ---------------------------------------------------------------------------

class QuadratureGrid(BaseModel):
    """Tensor quadrature rule for the exact oracle."""
    model_config = ConfigDict(frozen=True)

    rule: Literal["gauss_hermite", "adaptive_trapezoid"] = "gauss_hermite"
    nodes_per_dim: int = Field(default=32, ge=4)
    domain_halfwidth: Optional[float] = Field(default=None, gt=0, description="Half-width in reference standard deviations")
    rtol: float = Field(default=1e-8, gt=0, description="Self-consistency gate under node doubling")
    max_refinements: int = Field(default=3, ge=0)
    max_points: int = Field(default=2**25, ge=1, description="Cap on total tensor nodes")


class MomentRecord(ArrayModel):
    """Exact moments of a general model."""
    log_z: float = Field(..., description="log of the partition function")
    mean: np.ndarray
    second: np.ndarray = Field(..., description="<phi_x phi_y>")
    truncated: np.ndarray = Field(..., description="<phi_x; phi_y>")
    fourth: np.ndarray = Field(..., description="<phi_x^4>")
    observables: Dict[str, float] = Field(default_factory=dict)
    nodes_per_dim: int
    rule: str
    gate_change: float = Field(..., description="Max relative change under node doubling")

    @field_serializer("mean", "second", "truncated", "fourth")
    def _arrays(self, value):
        return _serialize_array(value)


class InequalityCheck(BaseModel):
    """Outcome of one falsification attempt."""
    name: str
    passed: bool
    n_checked: int
    min_slack: float = Field(..., description="Smallest observed slack (negative means violation)")
    tolerance: float
    details: Dict[str, float] = Field(default_factory=dict)


class OracleReport(BaseModel):
    checks: List[InequalityCheck]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


# ---------------------------------------------------------------------------
# skeleton
# ---------------------------------------------------------------------------

class DiagramNorms(BaseModel):
    """Exact lattice norms of the diagrams entering the skeleton recursion."""
    psi_l1: float
    psi_mass: float = Field(..., description="eps^d sum psi, zero to round-off")
    c_psi_l1: float
    c_psi_l2: float
    c_psi_c_l1: float = Field(..., description="||C * psi * C||_{L^1}")
    c_psi_c_linf: float = Field(..., description="||C * psi * C||_{L^inf}")
    bubble5: float = Field(..., description="||C (C^2 * C^2)||_{L^1}")
    c_c_c2: float = Field(..., description="||C (C * C^2)||_{L^1}")
    c_c_c: float = Field(..., description="||C (C * C)||_{L^1}")
    c_c_linf: float = Field(..., description="||C * C||_{L^inf}")
    c_c_c_linf: float = Field(..., description="||C * C * C||_{L^inf}")
    c_c2_c_linf: float = Field(..., description="||C * C^2 * C||_{L^inf}")
    psi_hat_max: Optional[float] = Field(default=None, description="max |psi_hat(k)| (d=3)")
    moments: CovarianceMoments


class ProvenancedValue(BaseModel):
    value: float
    provenance: Literal["explicit", "lattice-exact", "continuum-integral", "fitted-c", "observed-sup", "user"]


class BoundPolynomial(BaseModel):
    """Fixed-point bound on ||E||_{L^1} organised by powers of lambda."""
    coefficients: List[Tuple[int, float, str]] = Field(..., description="(power of lambda, coefficient, provenance)")
    value: float = Field(..., description="p evaluated at the given lambda")
    lambda_: float = Field(..., alias="lambda")
    t: float
    d: int
    mu: float
    m2: float
    e_linf_input: float
    iterations: int
    converged: bool
    available: bool = True
    reason: Optional[str] = None

    model_config = ConfigDict(populate_by_name=True)

    @model_validator(mode="after")
    def _check(self) -> "BoundPolynomial":
        for power, coefficient, _ in self.coefficients:
            if coefficient < 0:
                raise ValueError(f"coefficient of lambda^{power} is negative")
            if power == 0 and coefficient > 0 and self.mu == self.m2:
                raise ValueError("constant term must vanish when mu = m2")
        return self

    @property
    def degree(self) -> int:
        powers = [p for p, c, _ in self.coefficients if c > 0]
        return max(powers) if powers else 0


class WindowCertificate(BaseModel):
    """Small-scale window on which ||E||_{L^1 cap L^inf} <= 2 c0 lambda is certified."""
    t0: Optional[float] = Field(default=None, description="None if the window is empty; inf for all scales")
    empty: bool
    c0: ProvenancedValue
    c0_observed_sup: float
    c0_assumption_ok: bool
    claim_bound: float = Field(..., description="2 c0 lambda")
    margins: List[Tuple[float, float]] = Field(default_factory=list, description="(t, c0 lambda/2 - f(2 c0 lambda))")
    lambda_: float = Field(..., alias="lambda")
    d: int
    mu: float
    m2: float

    model_config = ConfigDict(populate_by_name=True)


class BfsSlackReport(ArrayModel):
    """Per-displacement slack of the skeleton bounds in units of propagated stderr."""
    spec: LatticeSpec
    lower_slack: np.ndarray
    upper_slack: np.ndarray
    stderr: np.ndarray
    lower_rhs: np.ndarray
    upper_rhs: np.ndarray
    lhs: np.ndarray
    n_sigma: float = 3.0
    sign_check: bool = Field(..., description="lower RHS <= upper RHS everywhere")

    @property
    def violations(self) -> int:
        return int(np.sum(self.lower_slack < -self.n_sigma) + np.sum(self.upper_slack < -self.n_sigma))

    @field_serializer("lower_slack", "upper_slack", "stderr", "lower_rhs", "upper_rhs", "lhs")
    def _arrays(self, value):
        return _serialize_array(value)


Provenance = Literal["gaussian_exact", "mc_estimate", "skeleton_bound", "griffiths_cap", "brascamp_lieb", "input"]


class TailRule(BaseModel):
    """How chi_t continues beyond the last grid point."""
    kind: Literal["gaussian", "cap", "none"] = "none"
    chi_cap: Optional[float] = Field(default=None, gt=0)

    @model_validator(mode="after")
    def _check(self) -> "TailRule":
        if self.kind == "cap" and self.chi_cap is None:
            raise ValueError("cap tail requires chi_cap")
        return self


class HeadRule(BaseModel):
    """
    How chi_t is bounded on (0, t_0] below the first grid point.

    ``excess_integral`` bounds D(t_0) = int_0^{t_0} (chi_s - chi^G_s)/s^2 ds
    from above and ``excess_integral_lower`` from below (equal when exact).
    The excess keeps one sign on the head, so D stays between 0 and D(t_0).
    ``outer_integral`` is int_0^{t_0} exp(-2 kappa_t) dt when known in
    closed form.
    """
    kind: Literal["gaussian", "excess", "none"] = "none"
    method: Optional[Literal["closed_form", "quadrature", "user"]] = None
    excess_integral: Optional[float] = None
    excess_integral_lower: Optional[float] = None
    outer_integral: Optional[float] = Field(default=None, gt=0)

    @model_validator(mode="after")
    def _check(self) -> "HeadRule":
        if self.kind == "excess":
            if self.excess_integral is None or not math.isfinite(self.excess_integral):
                raise ValueError("excess head requires a finite excess_integral")
            if self.excess_integral_lower is not None and self.excess_integral_lower > self.excess_integral:
                raise ValueError("excess_integral_lower must not exceed excess_integral")
        return self

    @property
    def bounds(self) -> Tuple[float, float]:
        """(lower, upper) bounds on D(t_0)."""
        if self.kind == "gaussian":
            return 0.0, 0.0
        upper = float(self.excess_integral)
        lower = upper if self.excess_integral_lower is None else float(self.excess_integral_lower)
        return lower, upper


class SusceptibilityProfile(BaseModel):
    """t -> chi_t over a log grid, with provenance per point."""
    t_grid: List[float]
    chi_values: List[Optional[float]] = Field(..., description="None where no bound is available")
    provenance: List[Provenance]
    stderr: Optional[List[float]] = None
    m2: float = Field(..., gt=0, description="Reference Gaussian mass for the closed-form split")
    head_rule: HeadRule = Field(default_factory=HeadRule)
    tail_rule: TailRule = Field(default_factory=TailRule)
    chi_infinity: Optional[float] = Field(default=None, gt=0, description="chi at t = inf, for the gap upper bound")
    chi_infinity_stderr: Optional[float] = None

    @model_validator(mode="after")
    def _check(self) -> "SusceptibilityProfile":
        n = len(self.t_grid)
        if n == 0:
            raise ValueError("t_grid must not be empty")
        if len(self.chi_values) != n or len(self.provenance) != n:
            raise ValueError("chi_values and provenance must match t_grid")
        if self.stderr is not None and len(self.stderr) != n:
            raise ValueError("stderr must match t_grid")
        t = np.asarray(self.t_grid)
        if np.any(t <= 0) or np.any(np.diff(t) <= 0):
            raise ValueError("t_grid must be positive and strictly increasing")
        if any(c is not None and not c > 0 for c in self.chi_values):
            raise ValueError("chi values must be positive")
        return self

    def monotonicity_violations(self, n_sigma: float = 3.0) -> List[float]:
        """Grid points t where chi decreases beyond n_sigma joint stderr (exact/MC points only)."""
        out = []
        errs = self.stderr or [0.0] * len(self.t_grid)
        for i in range(1, len(self.t_grid)):
            a, b = self.chi_values[i - 1], self.chi_values[i]
            if a is None or b is None:
                continue
            if {self.provenance[i - 1], self.provenance[i]} <= {"gaussian_exact", "mc_estimate"}:
                allowed = n_sigma * math.hypot(errs[i - 1], errs[i]) + 1e-12 * abs(a)
                if b < a - allowed:
                    out.append(self.t_grid[i])
        return out

    def digest(self) -> str:
        from app.utils import canonical_json, sha256_hex
        return sha256_hex(canonical_json(self.model_dump(mode="json")))


# ---------------------------------------------------------------------------
# criterion
# ---------------------------------------------------------------------------

class LsiBoundReport(BaseModel):
    """Criterion integral and the resulting bounds on the log-Sobolev constant."""
    gamma_lower: Optional[float] = Field(default=None, description="None if the kappa integral diverges")
    gamma_lower_conservative: Optional[float] = None
    kappa_integral: Optional[float] = None
    gamma_upper: Optional[float] = None
    gamma_upper_stderr: Optional[float] = None
    profile_provenance: List[str]
    profile_digest: str
    diagnostics: Dict[str, object] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check(self) -> "LsiBoundReport":
        if self.gamma_lower is not None and self.kappa_integral is not None:
            if not math.isclose(self.gamma_lower, 1.0 / self.kappa_integral, rel_tol=1e-12):
                raise ValueError("gamma_lower must equal 1 / kappa_integral")
        return self

    @property
    def ordered(self) -> bool:
        if self.gamma_lower is None or self.gamma_upper is None:
            return True
        slack = 3.0 * (self.gamma_upper_stderr or 0.0)
        return self.gamma_lower <= self.gamma_upper + slack


class SpectralGapReport(BaseModel):
    """gamma <= 1/chi from the linear trial function F = w L^{-d/2} sum phi."""
    gamma_upper: float
    chi: float
    chi_stderr: Optional[float] = None
    var_f: Optional[float] = None
    var_f_stderr: Optional[float] = None
    dirichlet_form: float
    var_consistent: Optional[bool] = None
