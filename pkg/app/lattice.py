"""
Torus geometry, Fourier analysis and epsilon-weighted norms on the torus
Lambda_{eps,L} = L T^d intersected with eps Z^d.

Fields are numpy arrays of shape ``spec.shape`` (one axis per coordinate);
flattening in C order gives the row-major site index. Extra leading axes are
treated as batch dimensions by the transforms and by ``convolve``.

Fourier convention:

    f_hat(k) = eps^d sum_x exp(-i k.x) f(x)
    f(x)     = L^{-d} sum_k exp(i k.x) f_hat(k)

so that ``(f * g)^ = f_hat g_hat`` for the eps^d-weighted convolution.
"""

import math
from functools import lru_cache
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
import pandas as pd
import scipy.sparse as sp
import structlog
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.errors import ConfigurationError, DomainError, ShapeError


logger = structlog.get_logger(__name__)

SUPPORTED_DIMENSIONS = (2, 3)


class LatticeSpec(BaseModel):
    """Geometry of the periodic cubic torus."""
    model_config = ConfigDict(frozen=True)

    d: int = Field(..., description="Dimension")
    eps: float = Field(..., gt=0, description="Lattice spacing")
    L: float = Field(..., gt=0, description="Side length")
    n_per_side: int = Field(..., ge=1, description="Sites per axis, L / eps")

    @model_validator(mode="after")
    def _check_geometry(self) -> "LatticeSpec":
        if self.d not in SUPPORTED_DIMENSIONS:
            raise ValueError(f"d must be one of {SUPPORTED_DIMENSIONS}, got {self.d}")
        if not math.isclose(self.n_per_side * self.eps, self.L, rel_tol=1e-9):
            raise ValueError("n_per_side * eps must equal L")
        return self

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.n_per_side,) * self.d

    @property
    def axes(self) -> Tuple[int, ...]:
        """Trailing array axes that carry the lattice coordinates."""
        return tuple(range(-self.d, 0))

    @property
    def n_sites(self) -> int:
        return self.n_per_side ** self.d

    @property
    def volume_weight(self) -> float:
        """eps^d, the weight of one site."""
        return self.eps ** self.d

    @property
    def axis_momenta(self) -> np.ndarray:
        return _axis_momenta(self.n_per_side, self.eps)

    @property
    def theta(self) -> np.ndarray:
        """Eigenvalues of -Laplacian on the FFT grid (shape ``self.shape``)."""
        return _theta_grid(self.d, self.eps, self.n_per_side)

    @property
    def momenta(self) -> np.ndarray:
        """Momentum vectors on the FFT grid, shape ``self.shape + (d,)``."""
        grids = np.meshgrid(*([self.axis_momenta] * self.d), indexing="ij")
        return np.stack(grids, axis=-1)

    def dual_modes(self) -> List["DualMode"]:
        momenta = self.momenta.reshape(-1, self.d)
        thetas = self.theta.reshape(-1)
        return [DualMode(k=tuple(float(c) for c in k), theta=float(th)) for k, th in zip(momenta, thetas)]

    def coordinates(self) -> np.ndarray:
        """Integer site coordinates (units of eps) in row-major order, shape (n_sites, d)."""
        return np.stack(np.unravel_index(np.arange(self.n_sites), self.shape), axis=1)

    def field(self, values) -> np.ndarray:
        """
        Validate values as a field on this lattice.

        Accepts a flat row-major vector of length |Lambda| or an array of shape ``self.shape``.

        Raises:
            ShapeError: If the number of values does not match the lattice
            DomainError: If any value is not finite
        """
        array = np.asarray(values, dtype=np.float64)
        if array.size != self.n_sites:
            raise ShapeError(f"Field has {array.size} values, lattice has {self.n_sites} sites")
        if not np.all(np.isfinite(array)):
            raise DomainError("Field values must be finite")
        return array.reshape(self.shape)

    def delta(self) -> np.ndarray:
        """The unit of convolution, eps^{-d} at the origin and 0 elsewhere."""
        f = np.zeros(self.shape)
        f[(0,) * self.d] = 1.0 / self.volume_weight
        return f

    def constant(self, value: float = 1.0) -> np.ndarray:
        return np.full(self.shape, float(value))

    def reflect(self, f: np.ndarray) -> np.ndarray:
        """x -> -x (mod L) on the trailing lattice axes."""
        return np.roll(np.flip(f, axis=self.axes), 1, axis=self.axes)


class DualMode(BaseModel):
    """One point of the dual lattice with its Laplacian eigenvalue."""
    model_config = ConfigDict(frozen=True)

    k: Tuple[float, ...] = Field(..., description="Momentum vector")
    theta: float = Field(..., ge=0, description="theta(k) = sum_i (4/eps^2) sin^2(k_i eps / 2)")


@lru_cache(maxsize=64)
def _axis_momenta(n: int, eps: float) -> np.ndarray:
    k = 2.0 * np.pi * np.fft.fftfreq(n, d=eps)
    # fftfreq puts the Nyquist mode at -pi/eps; the dual lattice uses (-pi/eps, pi/eps]
    k[np.isclose(k, -np.pi / eps)] = np.pi / eps
    k.setflags(write=False)
    return k


@lru_cache(maxsize=64)
def _theta_grid(d: int, eps: float, n: int) -> np.ndarray:
    axis_theta = (4.0 / eps**2) * np.sin(_axis_momenta(n, eps) * eps / 2.0) ** 2
    axis_theta[0] = 0.0
    theta = np.zeros((n,) * d)
    for axis in range(d):
        shape = [1] * d
        shape[axis] = n
        theta = theta + axis_theta.reshape(shape)
    theta.setflags(write=False)
    return theta


def build_lattice(d: int, eps: float, L: float) -> LatticeSpec:
    """
    Build the torus Lambda_{eps,L} in dimension d.

    Args:
        d: Dimension, 2 or 3
        eps: Lattice spacing
        L: Side length, a positive integer multiple of eps

    Returns:
        LatticeSpec with n_per_side = L / eps

    Raises:
        ConfigurationError: If d is unsupported or L is not a multiple of eps
    """
    if d not in SUPPORTED_DIMENSIONS:
        raise ConfigurationError(f"lattice.d must be one of {SUPPORTED_DIMENSIONS}, got {d}")
    if not eps > 0 or not L > 0:
        raise ConfigurationError("lattice.eps and lattice.L must be positive")
    ratio = L / eps
    n = int(round(ratio))
    if n < 1 or not math.isclose(n, ratio, rel_tol=1e-9, abs_tol=1e-9):
        raise ConfigurationError(f"lattice.L = {L} is not a positive integer multiple of lattice.eps = {eps}")
    return LatticeSpec(d=d, eps=eps, L=L, n_per_side=n)


def _check_on_lattice(f: np.ndarray, spec: LatticeSpec, name: str) -> None:
    if f.ndim < spec.d or tuple(f.shape[-spec.d:]) != spec.shape:
        raise ShapeError(f"{name} has shape {f.shape}, expected trailing shape {spec.shape}")


def fourier(f: np.ndarray, spec: LatticeSpec) -> np.ndarray:
    """f_hat(k) = eps^d sum_x exp(-ik.x) f(x), on the trailing lattice axes."""
    f = np.asarray(f, dtype=np.float64)
    _check_on_lattice(f, spec, "field")
    return spec.volume_weight * np.fft.fftn(f, axes=spec.axes)


def inverse_fourier(f_hat: np.ndarray, spec: LatticeSpec) -> np.ndarray:
    """f(x) = L^{-d} sum_k exp(ik.x) f_hat(k); returns the complex array."""
    _check_on_lattice(np.asarray(f_hat), spec, "transform")
    return np.fft.ifftn(f_hat, axes=spec.axes) / spec.volume_weight


def real_multiplier_to_field(multiplier: np.ndarray, spec: LatticeSpec) -> np.ndarray:
    """Real-space kernel of a real, even Fourier multiplier."""
    return inverse_fourier(multiplier, spec).real


def convolve(f: np.ndarray, g: np.ndarray, spec: LatticeSpec) -> np.ndarray:
    """
    (f * g)(x) = eps^d sum_y f(x - y) g(y) on the torus.

    Raises:
        ShapeError: If either input does not live on ``spec``
    """
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    _check_on_lattice(f, spec, "f")
    _check_on_lattice(g, spec, "g")
    axes = spec.axes
    product = np.fft.rfftn(f, axes=axes) * np.fft.rfftn(g, axes=axes)
    return spec.volume_weight * np.fft.irfftn(product, s=spec.shape, axes=axes)


def lp_norm(f: np.ndarray, p: float, spec: LatticeSpec) -> float:
    """
    ||f||_{L^p} = (eps^d sum_x |f(x)|^p)^{1/p}; p = inf gives max |f|.

    Raises:
        DomainError: If p < 1
        ShapeError: If f does not live on ``spec``
    """
    if not p >= 1:
        raise DomainError(f"L^p norm requires p >= 1, got {p}")
    f = np.asarray(f, dtype=np.float64)
    _check_on_lattice(f, spec, "f")
    if math.isinf(p):
        return float(np.max(np.abs(f)))
    total = spec.volume_weight * np.sum(np.abs(f) ** p)
    return float(total ** (1.0 / p))


def laplacian_matrix(spec: LatticeSpec) -> sp.csr_matrix:
    """
    Sparse -Laplacian on the torus (row-major sites).

    Neighbours are counted with multiplicity, so the spectrum is exactly
    {theta(k)} also when n_per_side is 1 or 2.
    """
    index = np.arange(spec.n_sites).reshape(spec.shape)
    rows = [index.ravel()]
    cols = [index.ravel()]
    data = [np.full(spec.n_sites, 2.0 * spec.d / spec.eps**2)]
    for axis in range(spec.d):
        for shift in (1, -1):
            rows.append(index.ravel())
            cols.append(np.roll(index, shift, axis=axis).ravel())
            data.append(np.full(spec.n_sites, -1.0 / spec.eps**2))
    matrix = sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(spec.n_sites, spec.n_sites),
    )
    # coo -> csr sums duplicate entries
    return matrix.tocsr()


def field_table(spec: LatticeSpec, prefix: str = "coord", **values: np.ndarray) -> Tuple[List[dict], List[str]]:
    """
    Rows (site-index order, coordinates in units of eps) and column names for CSV output.

    Each keyword is a value column holding a field on ``spec``.
    """
    coord_names = [f"{prefix}_{i + 1}" for i in range(spec.d)]
    columns = coord_names + list(values)
    coords = spec.coordinates()
    flat = {name: np.asarray(v, dtype=np.float64).reshape(-1) for name, v in values.items()}
    rows = []
    for i in range(spec.n_sites):
        row = {name: int(coords[i, a]) for a, name in enumerate(coord_names)}
        row.update({name: float(column[i]) for name, column in flat.items()})
        rows.append(row)
    return rows, columns


def read_field_csv(path: Union[str, Path], spec: LatticeSpec, value_column: str = "value") -> np.ndarray:
    """
    Read a field written with header ``coord_1,...,coord_d,value``.

    Rows may appear in any order; every site must appear exactly once.

    Raises:
        ShapeError: If the file does not cover the lattice exactly
    """
    frame = pd.read_csv(path)
    coord_cols = [f"coord_{i + 1}" for i in range(spec.d)]
    missing = [c for c in coord_cols + [value_column] if c not in frame.columns]
    if missing:
        raise ShapeError(f"Field file {path} lacks columns {missing}")
    coords = frame[coord_cols].to_numpy(dtype=np.int64)
    if len(frame) != spec.n_sites or np.any(coords < 0) or np.any(coords >= spec.n_per_side):
        raise ShapeError(f"Field file {path} does not match lattice with {spec.n_sites} sites")
    index = np.ravel_multi_index(tuple(coords.T), spec.shape)
    if len(np.unique(index)) != spec.n_sites:
        raise ShapeError(f"Field file {path} repeats sites")
    values = np.empty(spec.n_sites)
    values[index] = frame[value_column].to_numpy(dtype=np.float64)
    return spec.field(values)
