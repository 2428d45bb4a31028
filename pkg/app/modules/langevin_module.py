"""
Overdamped Langevin dynamics, Euler-Maruyama discretisation.

    phi <- phi - mob grad S(phi) dt + sqrt(2 mob dt) xi,    mob = eps^{-d}

With the continuum normalisation this is the lattice stochastic heat equation
with white noise of variance eps^{-d} per site. The scheme carries an
O(dt) bias.
"""

from typing import Optional

import numpy as np
import structlog
from scipy.stats import norm

from app.errors import StepSizeError
from app.models import ChainConfig, GeneralModel
from app.modules import BaseSamplerModule


logger = structlog.get_logger(__name__)

DIVERGENCE_THRESHOLD = 1e6


class LangevinModule(BaseSamplerModule):
    """Euler-Maruyama steps of the gradient dynamics."""

    name = "langevin_euler"

    def __init__(self, model: GeneralModel, config: ChainConfig, volume_weight: float = 1.0):
        super().__init__(model, config, volume_weight)
        self.step_dt = config.step_dt
        self.steps = 0

    def _drift(self, phi: np.ndarray) -> np.ndarray:
        return -self.mobility * self.gradient(phi) * self.step_dt

    @property
    def noise_scale(self) -> float:
        return float(np.sqrt(2.0 * self.mobility * self.step_dt))

    def sweep(self, phi: np.ndarray, rng: np.random.Generator) -> float:
        phi += self._drift(phi) + self.noise_scale * rng.standard_normal(phi.size)
        self.steps += 1
        max_abs = float(np.max(np.abs(phi))) if np.all(np.isfinite(phi)) else float("inf")
        if max_abs > DIVERGENCE_THRESHOLD:
            raise StepSizeError(
                f"Langevin trajectory diverged at step {self.steps} (max |phi| = {max_abs:.3g}); reduce step_dt",
                step_dt=self.step_dt,
                sweep=self.steps,
                max_abs=max_abs,
            )
        return 1.0

    def parameters(self) -> dict:
        return {"step_dt": float(self.step_dt)}

    def transition_density(self, phi_from: np.ndarray, phi_to: np.ndarray, site: Optional[int] = None) -> float:
        """Gaussian one-step kernel of the whole configuration (not reversible)."""
        mean = phi_from + self._drift(phi_from)
        return float(np.prod(norm.pdf(phi_to, loc=mean, scale=self.noise_scale)))
