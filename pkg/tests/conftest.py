"""
Shared fixtures: small lattices, oracle models and fast chain settings.
"""

import json

import pytest

from app.lattice import build_lattice
from app.models import ChainConfig
from app.oracle import ferromagnet


@pytest.fixture
def square_spec():
    """4 x 4 torus at unit spacing."""
    return build_lattice(2, 1.0, 4.0)


@pytest.fixture
def fine_spec():
    """8 x 8 torus at spacing 1/2."""
    return build_lattice(2, 0.5, 4.0)


@pytest.fixture
def cube_spec():
    """4^3 torus at spacing 1/2."""
    return build_lattice(3, 0.5, 2.0)


@pytest.fixture
def plaquette_spec():
    """2 x 2 torus, small enough for the exact oracle."""
    return build_lattice(2, 1.0, 2.0)


@pytest.fixture
def pair_model():
    return ferromagnet(2)


@pytest.fixture
def fast_chain():
    return ChainConfig(n_burn=200, n_keep=4000, n_chains=4, n_batches=20, seed=11)


@pytest.fixture
def write_config(tmp_path):
    """Write a run configuration and return its path."""
    def _write(document, name="config.json"):
        path = tmp_path / name
        path.write_text(json.dumps(document), encoding="utf-8")
        return str(path)
    return _write
