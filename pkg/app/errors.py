"""
Error taxonomy for the phi4-lsi toolkit.

Every error derives from a built-in exception so callers may catch either the
specific class or the generic ``ValueError`` / ``RuntimeError``.
"""


class ConfigurationError(ValueError):
    """Invalid parameters or configuration documents."""


class ShapeError(ValueError):
    """Fields, kernels or estimates that do not live on the same lattice."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class CapabilityError(ValueError):
    """Request beyond what an exact method can handle (e.g. oracle size cap)."""


class PrecisionError(RuntimeError):
    """A numerical self-consistency gate did not pass."""


class StepSizeError(RuntimeError):
    """A discretised dynamics diverged."""

    def __init__(self, message: str, step_dt: float, sweep: int, max_abs: float):
        super().__init__(message)
        self.step_dt = step_dt
        self.sweep = sweep
        self.max_abs = max_abs


class SamplingQualityError(RuntimeError):
    """Monte Carlo output unusable for estimation."""


class InequalityViolation(RuntimeError):
    """A checked inequality failed beyond tolerance."""
