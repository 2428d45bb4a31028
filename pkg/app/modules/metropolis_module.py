"""
Site-wise Metropolis scheme with Gaussian proposals.
"""

from typing import Optional

import numpy as np
import structlog
from scipy.stats import norm

from app.models import ChainConfig, GeneralModel
from app.modules import BaseSamplerModule


logger = structlog.get_logger(__name__)


class MetropolisModule(BaseSamplerModule):
    """Random-walk Metropolis, one colour class at a time."""

    name = "metropolis_site"

    def __init__(self, model: GeneralModel, config: ChainConfig, volume_weight: float = 1.0):
        super().__init__(model, config, volume_weight)
        # conditional width scale: curvature of the site action, floored by the quartic
        curvature = np.maximum(self.local_quadratic, np.sqrt(model.g))
        self.scale = 1.0 / np.sqrt(np.maximum(curvature, 1e-12))
        self.width_factor = config.proposal_width

    @property
    def widths(self) -> np.ndarray:
        return self.width_factor * self.scale

    def sweep(self, phi: np.ndarray, rng: np.random.Generator) -> float:
        widths = self.widths
        accepted = 0
        for index, sites in enumerate(self.colour_classes):
            b = self.local_field(phi, index)
            x = phi[sites]
            y = x + widths[sites] * rng.standard_normal(sites.size)
            delta = self.local_energy(y, sites, b) - self.local_energy(x, sites, b)
            accept = rng.random(sites.size) < np.exp(np.minimum(0.0, -delta))
            phi[sites] = np.where(accept, y, x)
            accepted += int(np.count_nonzero(accept))
        return accepted / self.n_sites

    def tune(self, acceptance: float) -> None:
        low, high = self.config.target_acceptance
        if acceptance < low:
            self.width_factor *= 0.8
        elif acceptance > high:
            self.width_factor *= 1.25

    def parameters(self) -> dict:
        return {"proposal_width": float(self.width_factor)}

    def transition_density(self, phi_from: np.ndarray, phi_to: np.ndarray, site: Optional[int] = None) -> float:
        """q(y | x) min(1, exp(-dU)) for y != x at ``site``."""
        if site is None:
            raise ValueError("site-wise scheme needs the updated site")
        b = self.site_field(phi_from, site)
        x, y = phi_from[site], phi_to[site]
        delta = float(self.local_energy(y, site, b) - self.local_energy(x, site, b))
        return float(norm.pdf(y, loc=x, scale=self.widths[site]) * min(1.0, np.exp(-delta)))
