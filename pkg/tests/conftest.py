"""Shared small-grid fixtures (the acceptance module builds its own defaults)."""

import numpy as np
import pytest

from insenscontrol.geometry import Mesh, MeshConfig
from insenscontrol.weights import WeightParams, build_weights

SMALL = MeshConfig(radial_cells=8, angular_cells=16)


@pytest.fixture(scope="session")
def mesh():
    return Mesh(SMALL)


@pytest.fixture(scope="session")
def tiny_mesh():
    return Mesh(MeshConfig(radial_cells=4, angular_cells=8, omega=(1.1, 1.9), observation=(1.1, 1.9),
                           omega_prime=(1.2, 1.8), omega_second=(1.3, 1.7)))


@pytest.fixture(scope="session")
def weight_params():
    return WeightParams(time_steps=10)


@pytest.fixture(scope="session")
def weights(mesh, weight_params):
    return build_weights(mesh, weight_params)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def angular_bump(mesh, times, amplitude=1e-3, start=0.5, ramp=0.25):
    """Smooth source density near omega ∩ O, switched on at ``start``."""
    from insenscontrol.config import SourceSpec

    spec = SourceSpec(kind="angular-bump", amplitude=amplitude, start=start, ramp=ramp)
    return spec.load(mesh, times)
