"""Shared fixtures: seeded generators, small balls and a small synthetic scene."""

import numpy as np
import pytest

from hyperplace.hierarchy import PoolingSpec
from hyperplace.hypgeo import BallConfig, PoincareBall
from hyperplace.index import build_index
from hyperplace.synth import SceneSpec, generate_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def ball8():
    return PoincareBall(BallConfig(dim=8))


def interior(rng, n, dim, max_norm=0.9):
    """n random points with norms uniform in [0, max_norm)"""
    directions = rng.normal(size=(n, dim))
    directions /= np.linalg.norm(directions, axis=-1, keepdims=True)
    return directions * rng.uniform(0.0, max_norm, size=(n, 1))


@pytest.fixture(scope="session")
def small_spec():
    return SceneSpec(n_panoramas=40, channels=8, levels=4, noise=0.05, seed=3)


@pytest.fixture(scope="session")
def small_dataset(small_spec):
    return generate_dataset(small_spec)


@pytest.fixture(scope="session")
def small_pooling_spec(small_spec):
    return PoolingSpec(levels=small_spec.levels, channels=small_spec.channels, dim=small_spec.channels)


@pytest.fixture(scope="session")
def small_index(small_dataset, small_pooling_spec):
    config = BallConfig(dim=small_pooling_spec.dim)
    return build_index(small_dataset.sources(), small_pooling_spec.to_config(), config, small_dataset.layout)
