"""
Sampling schemes for the phi4-lsi toolkit.

Every scheme updates a flat configuration vector ``phi`` in place. Site-wise
schemes visit the colour classes of the coupling graph one after another;
sites within a class share no coupling, so a whole class is updated at once.
"""

from abc import ABC, abstractmethod
from typing import List, Optional

import numpy as np
import scipy.sparse as sp

from app.models import ChainConfig, GeneralModel


def colour_classes(off_diagonal: sp.csr_matrix) -> List[np.ndarray]:
    """
    Greedy proper colouring of the graph of non-zero off-diagonal couplings.

    On even tori visited in row-major order this is the checkerboard.
    """
    n = off_diagonal.shape[0]
    colours = np.full(n, -1, dtype=np.int64)
    indptr, indices = off_diagonal.indptr, off_diagonal.indices
    for site in range(n):
        taken = {int(colours[j]) for j in indices[indptr[site]:indptr[site + 1]] if j != site}
        colour = 0
        while colour in taken:
            colour += 1
        colours[site] = colour
    return [np.flatnonzero(colours == c) for c in range(int(colours.max()) + 1)] if n else []


class BaseSamplerModule(ABC):
    """Base class for all sampling schemes."""

    name = "base"

    def __init__(self, model: GeneralModel, config: ChainConfig, volume_weight: float = 1.0):
        """
        Initialize the scheme for one model.

        Args:
            model: Target measure
            config: Chain settings
            volume_weight: eps^d for continuum-normalised lattices, 1 otherwise
        """
        self.model = model
        self.config = config
        self.volume_weight = volume_weight
        self.mobility = 1.0 / volume_weight

        A = sp.csr_matrix(model.A)
        self.A = A
        self.diagonal = A.diagonal()
        off = (A - sp.diags(self.diagonal)).tocsr()
        off.eliminate_zeros()
        self.off_diagonal = off
        self.local_quadratic = self.diagonal + model.nu
        self.field_h = model.field_h
        self.colour_classes = colour_classes(off)
        self._class_rows = [off[sites] for sites in self.colour_classes]

    @property
    def n_sites(self) -> int:
        return self.model.n_sites

    def local_field(self, phi: np.ndarray, class_index: int) -> np.ndarray:
        """b_x = h_x - sum_{y != x} A_xy phi_y for the sites of one colour class."""
        sites = self.colour_classes[class_index]
        return self.field_h[sites] - self._class_rows[class_index] @ phi

    def site_field(self, phi: np.ndarray, site: int) -> float:
        row = self.off_diagonal.getrow(site)
        return float(self.field_h[site] - (row @ phi)[0])

    def local_energy(self, x: np.ndarray, sites, b: np.ndarray) -> np.ndarray:
        """Conditional action a/2 x^2 + g/4 x^4 - b x of the given sites."""
        a = self.local_quadratic[sites]
        return 0.5 * a * x**2 + 0.25 * self.model.g * x**4 - b * x

    def gradient(self, phi: np.ndarray) -> np.ndarray:
        return self.A @ phi + self.model.g * phi**3 + self.model.nu * phi - self.field_h

    def tune(self, acceptance: float) -> None:
        """Adapt proposal parameters during burn-in; no-op for schemes without any."""

    def parameters(self) -> dict:
        """Tunable parameters at the end of the run, for the chain record."""
        return {}

    @abstractmethod
    def sweep(self, phi: np.ndarray, rng: np.random.Generator) -> float:
        """
        Advance ``phi`` in place by one sweep.

        Args:
            phi: Flat configuration
            rng: Generator reserved for this sweep

        Returns:
            Fraction of accepted site updates
        """
        pass

    @abstractmethod
    def transition_density(self, phi_from: np.ndarray, phi_to: np.ndarray, site: Optional[int] = None) -> float:
        """
        Density of the continuous part of one update from ``phi_from`` to ``phi_to``.

        Site-wise schemes update ``site`` only; ``phi_to`` must agree with
        ``phi_from`` elsewhere.
        """
        pass
