"""Hand-made scenes and maps shared by the tests."""

import numpy as np

from modules.simulator import Scene
from modules.world_map import FREE, OCCUPIED, UNKNOWN, WorldMap, pack_keys

# (albedo, specular strength, specular direction, exponent)
LAMBERT = (np.array([0.6, 0.4, 0.2]), 0.0, np.array([0.0, 0.0, 1.0]), 1.0)


def make_scene(size, boxes, start, start_axis=(1.0, 0.0, 0.0), materials=(LAMBERT,),
               voxel_size=0.05, name="test"):
    """Scene from voxel-index boxes [(lo, hi, material), ...]."""
    size = np.asarray(size, dtype=np.float64)
    grid = np.zeros(tuple(np.round(size / voxel_size).astype(int)), dtype=np.int32)
    for lo, hi, m in boxes:
        grid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = m + 1
    albedo, strength, spec_dir, exponent = zip(*materials)
    scene = Scene(
        name=name,
        bounds_max=size,
        voxel_size=voxel_size,
        grid=grid,
        albedo=np.array(albedo, dtype=np.float64),
        strength=np.array(strength, dtype=np.float64),
        spec_dir=np.array(spec_dir, dtype=np.float64),
        exponent=np.array(exponent, dtype=np.float64),
        background=np.zeros(3),
        start=np.asarray(start, dtype=np.float64),
        start_axis=np.asarray(start_axis, dtype=np.float64),
    )
    scene.validate()
    return scene


def wall_scene(materials=(LAMBERT,)):
    """2.4 x 1.2 x 1.2 m box whose far wall face sits at x = 2.3, 2 m ahead of the start."""
    return make_scene((2.4, 1.2, 1.2), [((46, 0, 0), (48, 24, 24), 0)], start=(0.3, 0.6, 0.6),
                      materials=materials, name="wall")


def open_world(lattice, size=2.4, state=FREE, max_range=4.0):
    world = WorldMap(np.zeros(3), np.full(3, size), lattice, voxel_size=0.05, cell_size=0.2,
                     max_range=max_range)
    world.occupancy[:] = state
    return world


def flat(world, index):
    i, j, k = (int(v) for v in index)
    return (i * int(world.dims[1]) + j) * int(world.dims[2]) + k


def cell_voxel_keys(world, index):
    """Keys of every stats voxel inside one occupancy cell (bounds_min at the origin)."""
    per = int(round(world.cell_size / world.voxel_size))
    offsets = np.stack(np.meshgrid(*(np.arange(per),) * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    return pack_keys(np.asarray(index) * per + offsets)


def seed_voxels(world, keys, position, rgb=(0.5, 0.5, 0.5)):
    """One observation per key from `position`, then mark the enclosing cells occupied."""
    keys = np.asarray(keys, dtype=np.int64)
    offsets = world.voxel_centers(keys) - np.asarray(position, dtype=np.float64)
    depths = np.linalg.norm(offsets, axis=1)
    world.stats.update_samples(world.lattice, keys, offsets / depths[:, None],
                               np.tile(np.asarray(rgb, dtype=np.float64), (len(keys), 1)), depths)
    world._register_voxels(keys)


def slab_walk(world, origin, direction, max_range):
    """Flat ids of cells a ray crosses within max_range, by slab intersection with every cell."""
    dims = world.dims
    idx = np.stack(np.meshgrid(*(np.arange(n) for n in dims), indexing="ij"), axis=-1).reshape(-1, 3)
    lo = world.bounds_min + idx * world.cell_size
    hi = lo + world.cell_size
    d = np.asarray(direction, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / d
        t2 = (hi - origin) / d
    t_enter = np.maximum(np.minimum(t1, t2).max(axis=1), 0.0)
    t_exit = np.maximum(t1, t2).min(axis=1)
    crossed = np.flatnonzero((t_exit > t_enter) & (t_enter < max_range))
    return crossed[np.argsort(t_enter[crossed], kind="stable")]


def walk_until_surface(world, origin, direction, max_range):
    """(unknown cells before the first occupied one, that occupied cell or None)."""
    unknown = []
    for f in slab_walk(world, origin, direction, max_range).tolist():
        state = world.occupancy[f]
        if state == OCCUPIED:
            return unknown, f
        if state == UNKNOWN:
            unknown.append(f)
    return unknown, None
