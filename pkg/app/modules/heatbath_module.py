"""
Site-wise heat-bath scheme.

Each site is redrawn from its exact conditional density

    p(x) ~ exp(-a/2 x^2 - g/4 x^4 + b x)

by rejection from the Gaussian envelope N(b/k, 1/k), k = max(a, sqrt(g)).
The log acceptance ratio (k - a)/2 x^2 - g/4 x^4 is bounded by (k - a)^2 / (4g).
"""

import math
from typing import Optional

import numpy as np
import structlog
from scipy import integrate

from app.errors import DomainError, SamplingQualityError
from app.models import ChainConfig, GeneralModel
from app.modules import BaseSamplerModule


logger = structlog.get_logger(__name__)

MAX_REJECTION_ROUNDS = 10000


class HeatBathModule(BaseSamplerModule):
    """Exact conditional redraws, one colour class at a time."""

    name = "heatbath_site"

    def __init__(self, model: GeneralModel, config: ChainConfig, volume_weight: float = 1.0):
        super().__init__(model, config, volume_weight)
        a = self.local_quadratic
        g = model.g
        if g == 0 and np.any(a <= 0):
            raise DomainError("Gaussian conditional needs a positive quadratic coefficient at every site")
        self.kappa = np.maximum(a, math.sqrt(g))
        self.log_bound = (self.kappa - a) ** 2 / (4.0 * g) if g > 0 else np.zeros_like(a)

    def sweep(self, phi: np.ndarray, rng: np.random.Generator) -> float:
        g = self.model.g
        for index, sites in enumerate(self.colour_classes):
            b = self.local_field(phi, index)
            kappa = self.kappa[sites]
            lift = self.kappa[sites] - self.local_quadratic[sites]
            bound = self.log_bound[sites]
            mean, sd = b / kappa, 1.0 / np.sqrt(kappa)
            pending = np.arange(sites.size)
            draws = np.empty(sites.size)
            for _ in range(MAX_REJECTION_ROUNDS):
                x = mean[pending] + sd[pending] * rng.standard_normal(pending.size)
                log_ratio = 0.5 * lift[pending] * x**2 - 0.25 * g * x**4 - bound[pending]
                accept = rng.random(pending.size) < np.exp(np.minimum(log_ratio, 0.0))
                draws[pending[accept]] = x[accept]
                pending = pending[~accept]
                if pending.size == 0:
                    break
            else:
                raise SamplingQualityError(
                    f"heat-bath envelope rejected {pending.size} sites {MAX_REJECTION_ROUNDS} times"
                )
            phi[sites] = draws
        return 1.0

    def transition_density(self, phi_from: np.ndarray, phi_to: np.ndarray, site: Optional[int] = None) -> float:
        """Conditional density of the new value at ``site``; independent of the old one."""
        if site is None:
            raise ValueError("site-wise scheme needs the updated site")
        b = self.site_field(phi_from, site)
        a, g = float(self.local_quadratic[site]), self.model.g

        def energy(x: float) -> float:
            return 0.5 * a * x * x + 0.25 * g * x**4 - b * x

        # shift by the energy at the envelope mean to keep the integrand O(1)
        shift = energy(b / float(self.kappa[site]))
        z, _ = integrate.quad(lambda x: math.exp(shift - energy(x)), -math.inf, math.inf)
        return math.exp(shift - energy(float(phi_to[site]))) / z
