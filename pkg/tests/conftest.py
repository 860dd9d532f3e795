import math

import numpy as np
import pytest

from modules.fibsphere import build_fov_sets, build_lattice
from modules.geometry import Intrinsics
from modules.planner import PlannerConfig

from support import wall_scene as _wall_scene


@pytest.fixture(scope="session")
def lattice():
    return build_lattice(n_bins=64)


@pytest.fixture(scope="session")
def pano_lattice():
    return build_fov_sets(build_lattice(theta_res=math.radians(10.0)), math.radians(39.2))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def wall_scene():
    return _wall_scene()


@pytest.fixture
def small_intrinsics():
    return Intrinsics.from_fov(24, 24, math.radians(60.0), math.radians(60.0))


@pytest.fixture
def fast_planner():
    """Planner settings small enough for unit tests."""
    return PlannerConfig(candidate_count=4, directions_per_position=2, probe_resolution=16, rng_seed=7)
