"""End-to-end checks on the preset scenes; run with -m slow."""

import math

import numpy as np
import pytest

from modules._jit import HAS_NUMBA
from modules.bench import bench_keyframes, bench_query
from modules.fibsphere import build_fov_sets, build_lattice
from modules.geometry import Intrinsics
from modules.planner import PlannerConfig
from modules.simulator import Budget, build_scene, eval_grid_poses, eval_novel_views, run_episode, world_for_scene

pytestmark = pytest.mark.slow

INTRINSICS = Intrinsics.from_fov(64, 64, math.radians(60.0), math.radians(60.0))


@pytest.fixture(scope="module")
def lattices():
    pano = build_fov_sets(build_lattice(theta_res=math.radians(10.0)), math.radians(39.2))
    return build_lattice(n_bins=64), pano


def _episode(name, cfg, views, lattices, scene_seed=0):
    scene = build_scene(name, seed=scene_seed)
    lattice, pano = lattices
    result = run_episode(scene, world_for_scene(scene, lattice), cfg, INTRINSICS, Budget(views), pano_lattice=pano)
    return scene, result


@pytest.mark.parametrize("name", ["specular_gallery", "two_rooms"])
def test_deficit_tracks_image_error(name, lattices):
    scene, result = _episode(name, PlannerConfig(), 20, lattices)
    report = eval_novel_views(scene, result.world, eval_grid_poses(scene), INTRINSICS)
    spearman = report["summary"]["spearman"]
    assert spearman is not None and spearman >= 0.5


def test_planner_beats_random_candidates(lattices):
    planned, random = [], []
    for seed in range(5):
        for mode, sink in (("pinhole", planned), ("random", random)):
            cfg = PlannerConfig(mode=mode, rng_seed=seed)
            scene, result = _episode("two_rooms", cfg, 30, lattices, scene_seed=seed)
            report = eval_novel_views(scene, result.world, eval_grid_poses(scene), INTRINSICS)
            sink.append(report["summary"]["mse_mean"])
    assert np.median(planned) <= 0.8 * np.median(random)


@pytest.mark.skipif(not HAS_NUMBA, reason="latency targets assume compiled kernels")
def test_query_latency(lattices):
    lattice, _ = lattices
    rows = bench_query(lattice, [100_000], 5, np.random.default_rng(0))
    assert rows[0]["best_ms"] <= 50.0


@pytest.mark.skipif(not HAS_NUMBA, reason="latency targets assume compiled kernels")
def test_frame_cost_does_not_grow_with_keyframes(lattices):
    lattice, _ = lattices
    rows = bench_keyframes(lattice, [50, 500], 2000, 5, np.random.default_rng(0))
    by_k = {r["keyframes"]: r["total_ms"] for r in rows}
    assert by_k[500] <= 1.25 * by_k[50]
    assert rows[0]["bytes_per_voxel"] == rows[1]["bytes_per_voxel"] <= 128
