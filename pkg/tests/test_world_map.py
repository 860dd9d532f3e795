import logging
import math

import numpy as np
import pytest
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import shortest_path as csgraph_shortest_path

from modules.errors import MapError, UnreachableError
from modules.geometry import Intrinsics, Pose, in_frustum, pixel_rays
from modules.simulator import build_scene, render_rgbd, world_for_scene
from modules.world_map import (
    FREE,
    OCCUPIED,
    UNKNOWN,
    CellState,
    Frame,
    View,
    WorldMap,
    distance_field,
    ingest_frame,
    pack_keys,
    path_cost,
    probe,
    shortest_path,
    unpack_keys,
    visible_unknown_cells,
    visible_voxels,
)

from support import cell_voxel_keys, flat, open_world, seed_voxels, walk_until_surface


def _wall_frame(scene, intrinsics):
    return render_rgbd(scene, Pose.look_along(scene.start, scene.start_axis), intrinsics)


def _samples(frame):
    """(keys, ranges) of the valid pixels of a frame, computed the way a reader would."""
    origin = frame.pose.position
    rays = pixel_rays(frame.pose, frame.intrinsics)
    depth = frame.depth.ravel()
    valid = np.isfinite(depth) & (depth > 0.0)
    points = origin + rays[valid] * depth[valid, None]
    return points, np.linalg.norm(points - origin, axis=1)


# --- keys and construction ------------------------------------------------------------

def test_keys_pack_and_unpack_negative_indices():
    idx = np.array([[0, 0, 0], [-3, 7, -1], [1000, -1000, 5]])
    assert np.array_equal(unpack_keys(pack_keys(idx)), idx)
    assert len(np.unique(pack_keys(idx))) == 3


@pytest.mark.parametrize("kwargs", [
    {"bounds_min": [0.1, 0.0, 0.0]},
    {"cell_size": 0.07},
    {"bounds_max": [0.0, 1.0, 1.0]},
])
def test_map_construction_errors(lattice, kwargs):
    args = {"bounds_min": [0.0, 0.0, 0.0], "bounds_max": [1.0, 1.0, 1.0], "cell_size": 0.2}
    args.update(kwargs)
    with pytest.raises(MapError):
        WorldMap(args["bounds_min"], args["bounds_max"], lattice, voxel_size=0.05, cell_size=args["cell_size"])


# --- ingestion ------------------------------------------------------------------------

def test_wall_frame_statistics(wall_scene, small_intrinsics, lattice):
    world = world_for_scene(wall_scene, lattice)
    frame = _wall_frame(wall_scene, small_intrinsics)
    report = ingest_frame(world, frame)
    points, ranges = _samples(frame)
    keys = world.voxel_keys(points)

    assert report["valid_pixels"] == len(points) > 0
    assert report["out_of_bounds"] == 0
    assert report["samples"] == int(world.stats.counts[: len(world.stats)].sum()) == len(points)
    assert report["voxels_touched"] == report["new_voxels"] == len(np.unique(keys))
    assert set(world.stats.keys().tolist()) == set(keys.tolist())

    for key in np.unique(keys).tolist():
        s = world.stats.get(key)
        assert s.rho_max == pytest.approx(np.max(1.0 / ranges[keys == key]), rel=1e-12)
        assert 1 <= s.popcount() <= s.n
        assert s.delta() == 1.0
    popcounts = [world.stats.get(k).popcount() for k in np.unique(keys).tolist()]
    assert np.mean(popcounts) <= 1.5


def test_repeated_frame_doubles_counts_only(wall_scene, small_intrinsics, lattice):
    world = world_for_scene(wall_scene, lattice)
    frame = _wall_frame(wall_scene, small_intrinsics)
    ingest_frame(world, frame)
    first = {k: world.stats.get(k) for k in world.stats.keys().tolist()}
    occupancy = world.occupancy.copy()
    report = ingest_frame(world, frame)
    assert report["new_voxels"] == 0
    assert np.array_equal(world.occupancy, occupancy)
    for key, before in first.items():
        after = world.stats.get(key)
        assert after.n == 2 * before.n
        assert np.array_equal(after.bin_mask, before.bin_mask)
        assert after.rho_max == before.rho_max
        assert after.delta() == 1.0
    assert world.frames_ingested == 2


def test_every_stats_voxel_sits_in_an_occupied_cell(wall_scene, small_intrinsics, lattice):
    world = world_for_scene(wall_scene, lattice)
    ingest_frame(world, _wall_frame(wall_scene, small_intrinsics))
    cells = world.flat_cells(world.voxel_centers(world.stats.keys()))
    assert np.all(world.occupancy[cells] == OCCUPIED)
    assert world.state_at(wall_scene.start) == CellState.FREE
    assert sum(len(v) for v in world.cell_members.values()) == len(world.stats)


def test_threaded_ingest_matches_serial(wall_scene, small_intrinsics, lattice):
    frame = _wall_frame(wall_scene, small_intrinsics)
    serial = world_for_scene(wall_scene, lattice)
    threaded = world_for_scene(wall_scene, lattice)
    a = ingest_frame(serial, frame)
    b = ingest_frame(threaded, frame, workers=2)
    assert a == b
    assert np.array_equal(serial.occupancy, threaded.occupancy)
    assert sorted(serial.stats.keys().tolist()) == sorted(threaded.stats.keys().tolist())
    for key in serial.stats.keys().tolist():
        assert serial.stats.get(key).to_bytes() == threaded.stats.get(key).to_bytes()


@pytest.mark.parametrize("workers", [2, 3])
def test_threaded_ingest_continues_existing_voxels_exactly(lattice, workers):
    scene = build_scene("specular_gallery")
    intr = Intrinsics.from_fov(32, 32, math.radians(60.0), math.radians(60.0))
    target = np.array([2.4, 0.0, 1.1])
    serial = world_for_scene(scene, lattice)
    threaded = world_for_scene(scene, lattice)
    for position in ([1.0, 0.9, 1.1], [3.0, 0.9, 1.1], [2.0, 1.0, 1.1], [0.6, 3.0, 0.9]):
        position = np.array(position)
        frame = render_rgbd(scene, Pose.look_along(position, target - position), intr)
        assert ingest_frame(serial, frame) == ingest_frame(threaded, frame, workers=workers)

    assert serial.frames_ingested == 4
    # glossy voxels seen from several sides carry color spread
    assert np.any(serial.stats.deltas() < 1.0)
    assert np.array_equal(serial.occupancy, threaded.occupancy)
    assert serial.stats.to_records().tobytes() == threaded.stats.to_records().tobytes()


def test_no_return_pixels_carve_free_space(lattice, small_intrinsics):
    world = open_world(lattice, state=UNKNOWN, max_range=1.0)
    pose = Pose.look_along([0.3, 1.2, 1.2], [1.0, 0.0, 0.0])
    frame = Frame(pose, np.zeros((24, 24, 3)), np.zeros((24, 24)), small_intrinsics)
    report = ingest_frame(world, frame)
    counts = world.counts()
    assert report["samples"] == 0 and counts["voxels"] == 0
    assert counts["occupied"] == 0 and counts["free"] == report["cells_carved"] > 1
    assert world.state_at([1.0, 1.3, 1.3]) == CellState.FREE
    assert world.state_at([2.2, 1.3, 1.3]) == CellState.UNKNOWN


def test_occupied_cells_survive_carving(lattice, small_intrinsics):
    world = open_world(lattice, state=UNKNOWN)
    blocker = flat(world, (3, 6, 6))
    world.occupancy[blocker] = OCCUPIED
    pose = Pose.look_along([0.3, 1.3, 1.3], [1.0, 0.0, 0.0])
    ingest_frame(world, Frame(pose, np.zeros((24, 24, 3)), np.zeros((24, 24)), small_intrinsics))
    assert world.occupancy[blocker] == OCCUPIED


def test_out_of_range_colors_are_clamped(lattice, small_intrinsics, caplog):
    world = open_world(lattice, state=UNKNOWN)
    pose = Pose.look_along([0.3, 1.2, 1.2], [1.0, 0.0, 0.0])
    frame = Frame(pose, np.full((24, 24, 3), 1.5), np.ones((24, 24)), small_intrinsics)
    with caplog.at_level(logging.WARNING, logger="modules.world_map"):
        report = ingest_frame(world, frame)
    assert report["clamped"] == report["samples"] == 24 * 24
    assert np.all(world.stats.means[: len(world.stats)] == 1.0)
    assert "clamped" in caplog.text


def test_pose_outside_bounds_rejected(lattice, small_intrinsics):
    world = open_world(lattice, state=UNKNOWN)
    pose = Pose.look_along([5.0, 5.0, 5.0], [1.0, 0.0, 0.0])
    with pytest.raises(MapError):
        ingest_frame(world, Frame(pose, np.zeros((24, 24, 3)), np.zeros((24, 24)), small_intrinsics))


def test_bad_intrinsics_rejected(lattice):
    world = open_world(lattice, state=UNKNOWN)
    bad = Intrinsics(np.nan, 10.0, 4.0, 4.0, 8, 8)
    pose = Pose.look_along([0.3, 1.2, 1.2], [1.0, 0.0, 0.0])
    with pytest.raises(MapError):
        ingest_frame(world, Frame(pose, np.zeros((8, 8, 3)), np.zeros((8, 8)), bad))


def test_mismatched_image_rejected(lattice, small_intrinsics):
    world = open_world(lattice, state=UNKNOWN)
    pose = Pose.look_along([0.3, 1.2, 1.2], [1.0, 0.0, 0.0])
    with pytest.raises(MapError):
        ingest_frame(world, Frame(pose, np.zeros((24, 23, 3)), np.zeros((24, 24)), small_intrinsics))


# --- visibility -------------------------------------------------------------------------

def test_probe_requires_a_free_cell(lattice, small_intrinsics):
    world = open_world(lattice, state=UNKNOWN)
    with pytest.raises(UnreachableError):
        probe(world, [1.0, 1.0, 1.0], View.pinhole([1.0, 0.0, 0.0], small_intrinsics))


def test_empty_map_has_no_visible_voxels(lattice, small_intrinsics):
    world = open_world(lattice, state=UNKNOWN)
    position = [1.1, 1.1, 1.1]
    world.occupancy[world.flat_cells(position)] = FREE
    view = View.pinhole([0.0, 1.0, 0.0], small_intrinsics)
    assert len(visible_voxels(world, position, view).voxel_keys) == 0
    near = visible_unknown_cells(world, position, view, max_range=0.5)
    far = visible_unknown_cells(world, position, view, max_range=2.0)
    assert set(near.tolist()) < set(far.tolist())


def test_explored_map_has_no_gain(lattice, small_intrinsics):
    world = open_world(lattice, state=FREE)
    assert len(visible_unknown_cells(world, [1.1, 1.1, 1.1], View.pinhole([1.0, 0.0, 0.0], small_intrinsics))) == 0


def _aimed_camera(world, pano_lattice, target_index):
    """A camera 1 m from the target cell center along a panoramic lattice direction."""
    target = world.cell_centers([flat(world, target_index)])[0]
    k = int(np.argmax(pano_lattice.centers @ np.array([1.0, 0.0, 0.0])))
    return target - pano_lattice.centers[k]


def test_panoramic_probe_sees_a_single_cell(lattice, pano_lattice):
    world = open_world(lattice, state=FREE)
    position = _aimed_camera(world, pano_lattice, (6, 5, 5))
    keys = cell_voxel_keys(world, (6, 5, 5))
    seed_voxels(world, keys, position)
    result = probe(world, position, View.panoramic(), pano_lattice=pano_lattice)
    assert np.array_equal(result.voxel_keys, np.sort(keys))
    assert np.all(np.abs(result.voxel_depths - 1.0) <= 0.15)
    assert np.allclose(np.linalg.norm(result.voxel_dirs, axis=1), 1.0)
    assert len(result.unknown_cells) == 0


def test_panoramic_probe_needs_its_lattice(lattice):
    world = open_world(lattice, state=FREE)
    with pytest.raises(MapError):
        probe(world, [1.1, 1.1, 1.1], View.panoramic())


def test_occluded_voxels_are_not_visible(lattice, pano_lattice):
    world = open_world(lattice, state=FREE)
    position = _aimed_camera(world, pano_lattice, (6, 5, 5))
    near = cell_voxel_keys(world, (6, 5, 5))
    seed_voxels(world, near, position)
    seed_voxels(world, cell_voxel_keys(world, (8, 5, 5)), position)
    # a full occupied slab at i = 6 hides everything behind it
    for j in range(world.dims[1]):
        for k in range(world.dims[2]):
            world.occupancy[flat(world, (6, j, k))] = OCCUPIED
    result = visible_voxels(world, position, View.panoramic(), pano_lattice=pano_lattice)
    assert np.array_equal(result.voxel_keys, np.sort(near))


@pytest.mark.parametrize("seed", range(5))
def test_probe_matches_slab_oracle(lattice, seed):
    gen = np.random.default_rng(seed)
    world = WorldMap(np.zeros(3), np.full(3, 1.6), lattice, voxel_size=0.05, cell_size=0.2, max_range=1.0)
    world.occupancy[:] = gen.choice([UNKNOWN, FREE, OCCUPIED], size=world.occupancy.size, p=[0.4, 0.4, 0.2])
    origin_cell = (3, 3, 3)
    world.occupancy[flat(world, origin_cell)] = FREE
    origin = (np.array(origin_cell) + gen.uniform(0.2, 0.8, 3)) * world.cell_size
    for f in np.flatnonzero(world.occupancy == OCCUPIED).tolist():
        idx = (f // 64, (f % 64) // 8, f % 8)
        seed_voxels(world, cell_voxel_keys(world, idx)[:1], origin)

    axis = gen.normal(size=3)
    axis /= np.linalg.norm(axis)
    intr = Intrinsics.from_fov(12, 12, math.radians(60.0), math.radians(60.0))
    result = probe(world, origin, View.pinhole(axis, intr))

    unknown, hits = set(), set()
    pose = Pose.look_along(origin, axis)
    for ray in pixel_rays(pose, intr):
        cells, hit = walk_until_surface(world, origin, ray, world.max_range)
        unknown.update(cells)
        if hit is not None:
            hits.add(hit)
    assert set(result.unknown_cells.tolist()) == unknown

    members = np.array(sorted(k for c in hits for k in world.cell_members[c]), dtype=np.int64)
    expected = members[in_frustum(pose, intr, world.voxel_centers(members))] if len(members) else members
    assert np.array_equal(result.voxel_keys, expected)


# --- path cost ------------------------------------------------------------------------------

def test_path_to_self_is_free(lattice):
    world = open_world(lattice)
    assert path_cost(world, [0.3, 0.3, 0.3], [0.3, 0.3, 0.3]) == 0.0


def test_corridor_path_cost(lattice):
    world = open_world(lattice, state=OCCUPIED)
    for i in range(1, 6):
        world.occupancy[flat(world, (i, 1, 1))] = FREE
    start, goal = [0.3, 0.3, 0.3], [1.1, 0.3, 0.3]
    assert path_cost(world, start, goal) == pytest.approx(4 * 0.2)
    path = shortest_path(world, start, goal)
    assert len(path) == 5
    assert np.allclose(path[0], [0.3, 0.3, 0.3]) and np.allclose(path[-1], [1.1, 0.3, 0.3])


def test_unreachable_goal(lattice):
    world = open_world(lattice)
    for j in range(world.dims[1]):
        for k in range(world.dims[2]):
            world.occupancy[flat(world, (5, j, k))] = OCCUPIED
    assert path_cost(world, [0.3, 0.3, 0.3], [2.1, 0.3, 0.3]) is None
    assert shortest_path(world, [0.3, 0.3, 0.3], [2.1, 0.3, 0.3]) == []
    with pytest.raises(UnreachableError):
        path_cost(world, [0.3, 0.3, 0.3], [1.1, 0.3, 0.3])


def _adjacency(world):
    d0, d1, d2 = (int(v) for v in world.dims)
    free = (world.occupancy == FREE).reshape(d0, d1, d2)
    ids = np.arange(free.size).reshape(free.shape)
    rows, cols = [], []
    for axis in range(3):
        a = [slice(None)] * 3
        b = [slice(None)] * 3
        a[axis] = slice(0, -1)
        b[axis] = slice(1, None)
        both = free[tuple(a)] & free[tuple(b)]
        rows.append(ids[tuple(a)][both])
        cols.append(ids[tuple(b)][both])
    r, c = np.concatenate(rows), np.concatenate(cols)
    return coo_matrix((np.ones(len(r)), (r, c)), shape=(free.size, free.size)).tocsr()


@pytest.mark.parametrize("seed", range(4))
def test_distance_field_matches_graph_search(lattice, seed):
    gen = np.random.default_rng(100 + seed)
    world = WorldMap(np.zeros(3), np.full(3, 3.2), lattice, voxel_size=0.05, cell_size=0.2)
    world.occupancy[:] = np.where(gen.uniform(size=world.occupancy.size) < 0.7, FREE, OCCUPIED)
    start = int(gen.choice(world.free_cells()))
    field = distance_field(world, world.cell_centers([start])[0])
    ref = csgraph_shortest_path(_adjacency(world), directed=False, unweighted=True, indices=start)
    free = world.occupancy == FREE
    reachable = np.isfinite(ref) & free
    assert np.array_equal(field[reachable], ref[reachable].astype(np.int64))
    assert np.all(field[free & ~np.isfinite(ref)] == -1)

    goal = int(np.flatnonzero(reachable)[-1])
    path = shortest_path(world, world.cell_centers([start])[0], world.cell_centers([goal])[0])
    assert len(path) == field[goal] + 1
    steps = np.linalg.norm(np.diff(np.array(path), axis=0), axis=1)
    assert np.allclose(steps, 0.2)
    assert all(world.state_at(p) == CellState.FREE for p in path)
