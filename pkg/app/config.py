"""
Configuration management for the phi4-lsi toolkit.

Two layers:

* ``RunConfig`` is the per-run JSON document (lattice, model, sampler, grid,
  constants, oracle, output). Unknown keys are rejected and every default is
  materialised when the document is dumped, so runs are self-describing.
* ``AppConfig`` holds process-level settings read from the environment
  (optionally through a ``.env`` file).
"""

import json
import os
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.errors import ConfigurationError

# Load environment variables
load_dotenv()


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class LatticeConfig(_Section):
    """Torus geometry."""
    d: int = Field(..., description="Dimension (2 or 3)")
    eps: float = Field(..., gt=0, description="Lattice spacing")
    L: float = Field(..., gt=0, description="Torus side length")
    eps_sweep: Optional[List[float]] = Field(default=None, description="Spacings for counterterm sweeps")


class ModelConfig(_Section):
    """phi^4 parameters."""
    lambda_: float = Field(default=0.0, ge=0, alias="lambda", description="Quartic coupling")
    mu: float = Field(default=1.0, description="Mass term (any sign)")
    m2: float = Field(default=1.0, gt=0, description="Counterterm mass squared")
    t: Optional[float] = Field(default=None, gt=0, description="Scale parameter; null means t = infinity")
    normalisation: Literal["continuum", "lattice_section3"] = Field(default="continuum")
    external_field: Optional[List[float]] = Field(default=None, description="Site-wise field h, row-major")


class SamplerConfig(_Section):
    """Markov chain settings."""
    scheme: Literal["metropolis_site", "heatbath_site", "langevin_euler"] = Field(default="metropolis_site")
    step_dt: float = Field(default=0.01, gt=0, description="Langevin time step")
    n_burn: int = Field(default=1000, ge=0, description="Minimum burn-in sweeps")
    n_keep: int = Field(default=10000, ge=1, description="Kept samples per chain")
    thin: int = Field(default=1, ge=1, description="Sweeps between kept samples")
    n_chains: int = Field(default=4, ge=1)
    seed: int = Field(default=0, ge=0, lt=2**64, description="Master seed")
    proposal_width: float = Field(default=1.0, gt=0, description="Initial Metropolis proposal width")
    target_acceptance: Tuple[float, float] = Field(default=(0.3, 0.5))
    n_batches: int = Field(default=20, ge=2, description="Batches for batch-means errors")

    @field_validator("target_acceptance")
    @classmethod
    def _check_window(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        low, high = value
        if not 0.0 < low < high < 1.0:
            raise ValueError("target_acceptance must satisfy 0 < low < high < 1")
        return value


class GridConfig(_Section):
    """Scale grid and susceptibility profile source."""
    t_min: float = Field(default=1e-6, gt=0)
    t_max: float = Field(default=1e6, gt=0)
    points_per_decade: int = Field(default=200, ge=1)
    source: Literal["gaussian", "mc", "skeleton", "lattice_section3", "file"] = Field(default="gaussian")
    chi_cap: Optional[float] = Field(default=None, gt=0, description="Griffiths cap on chi_infinity")
    chi_infinity: Optional[float] = Field(default=None, gt=0, description="Estimate of chi at t = infinity")
    profile_path: Optional[str] = Field(default=None, description="chi_profile.csv to read for source=file")
    head_excess: Optional[float] = Field(
        default=None, description="Bound on D(t_0) = int_0^{t_0} (chi_s - chi^G_s)/s^2 ds below the first point of a profile file"
    )

    @model_validator(mode="after")
    def _check_range(self) -> "GridConfig":
        if self.t_max <= self.t_min:
            raise ValueError("t_max must exceed t_min")
        if self.source == "file" and not self.profile_path:
            raise ValueError("profile_path is required when source is 'file'")
        if self.head_excess is not None and self.source != "file":
            raise ValueError("head_excess only applies to source 'file'")
        return self


class ConstantsConfig(_Section):
    """Named bound constants; null means derive the default."""
    moment_source: Literal["lattice", "shape"] = Field(default="lattice")
    c0: Optional[float] = Field(default=None, gt=0)
    c0_headroom: float = Field(default=0.1, ge=0)
    c_c2: Optional[float] = Field(default=None, gt=0, description="||C^2||_1 shape constant")
    c_c3: Optional[float] = Field(default=None, gt=0, description="||C^3||_1 shape constant (d=2)")
    c_bubble5: Optional[float] = Field(default=None, gt=0, description="||C(C^2*C^2)||_1 shape constant")
    c_psi_l1: Optional[float] = Field(default=None, gt=0, description="||C*psi||_1 shape constant")
    c_psi_l2: Optional[float] = Field(default=None, gt=0, description="||C*psi||_2 shape constant")
    max_iterations: int = Field(default=64, ge=1)


class OracleConfig(_Section):
    """Exact small-lattice oracle settings."""
    rule: Literal["gauss_hermite", "adaptive_trapezoid"] = Field(default="gauss_hermite")
    nodes_per_dim: int = Field(default=32, ge=8)
    n_fields: int = Field(default=200, ge=1, description="Random external fields per correlation check")
    n_phi: int = Field(default=20, ge=1, description="Random fields per Hessian check")
    tolerance: float = Field(default=1e-6, gt=0)
    hessian_tolerance: float = Field(default=1e-5, gt=0)


class OutputConfig(_Section):
    """Where and how results are written."""
    directory: str = Field(default="results")
    dump_samples: bool = Field(default=False)
    float_format: str = Field(default="%.17g")


class RunConfig(_Section):
    """Complete run document."""
    lattice: Optional[LatticeConfig] = Field(default=None)
    model: ModelConfig = Field(default_factory=ModelConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    grid: GridConfig = Field(default_factory=GridConfig)
    constants: ConstantsConfig = Field(default_factory=ConstantsConfig)
    oracle: OracleConfig = Field(default_factory=OracleConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)

    def require_lattice(self) -> LatticeConfig:
        if self.lattice is None:
            raise ConfigurationError("lattice: section required for this command")
        return self.lattice

    def resolved(self) -> dict:
        """Fully materialised document, as emitted next to the results."""
        return self.model_dump(mode="json", by_alias=True)


def _format_validation_error(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        path = ".".join(str(p) for p in item["loc"]) or "<root>"
        parts.append(f"{path}: {item['msg']}")
    return "; ".join(parts)


def parse_run_config(document: dict) -> RunConfig:
    """
    Validate a configuration mapping.

    Raises:
        ConfigurationError: With dotted key paths for every problem found
    """
    try:
        return RunConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigurationError(f"Configuration errors: {_format_validation_error(e)}") from e


def load_run_config(path: Optional[Union[str, Path]]) -> RunConfig:
    """
    Load a run configuration from a JSON file, or the defaults when no path is given.

    Raises:
        ConfigurationError: If the document is not valid JSON or fails validation
        OSError: If the file cannot be read
    """
    if path is None:
        return parse_run_config({})
    text = Path(path).read_text(encoding="utf-8")
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Configuration errors: {path} is not valid JSON ({e})") from e
    if not isinstance(document, dict):
        raise ConfigurationError("Configuration errors: top level must be an object")
    return parse_run_config(document)


class RuntimeConfig(BaseModel):
    """Process-level settings."""
    workers: int = Field(default=1, description="Worker processes for independent chains")
    log_level: str = Field(default="INFO", description="Logging level")
    output_dir: Optional[str] = Field(default=None, description="Default output directory")


class AppConfig:
    """Application configuration singleton."""

    def __init__(self):
        self.runtime = RuntimeConfig(
            workers=int(os.getenv("PHI4_LSI_WORKERS", "1")),
            log_level=os.getenv("PHI4_LSI_LOG_LEVEL", "INFO"),
            output_dir=os.getenv("PHI4_LSI_OUTPUT_DIR"),
        )

    def validate(self) -> bool:
        """Validate configuration."""
        errors = []

        if self.runtime.workers < 1:
            errors.append("PHI4_LSI_WORKERS must be a positive integer")

        if self.runtime.log_level.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR"):
            errors.append("PHI4_LSI_LOG_LEVEL must be one of DEBUG, INFO, WARNING, ERROR")

        if errors:
            raise ConfigurationError(f"Configuration errors: {', '.join(errors)}")

        return True


# Global configuration instance
config = AppConfig()
