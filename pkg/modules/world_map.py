"""
World Map Module
Fine voxel-statistics map (surface primitives) plus a coarse occupancy grid
used for exploration gain, visibility probing and path cost.
"""

import logging
import threading
from dataclasses import dataclass
from enum import IntEnum
from typing import Dict, List, Optional

import numpy as np

from ._jit import njit
from .errors import MapError, UnreachableError
from .fibsphere import Lattice
from .geometry import Intrinsics, Pose, in_frustum, normalize, pixel_rays, ray_setup, ray_step
from .voxel_stats import StatsTable

logger = logging.getLogger(__name__)

KEY_BITS = 21
KEY_OFFSET = 1 << (KEY_BITS - 1)
KEY_MASK = (1 << KEY_BITS) - 1


class CellState(IntEnum):
    UNKNOWN = 0
    FREE = 1
    OCCUPIED = 2


UNKNOWN = np.uint8(CellState.UNKNOWN)
FREE = np.uint8(CellState.FREE)
OCCUPIED = np.uint8(CellState.OCCUPIED)


def pack_keys(index: np.ndarray) -> np.ndarray:
    """Pack integer voxel indices (n, 3) into int64 keys."""
    idx = np.asarray(index, dtype=np.int64).reshape(-1, 3) + KEY_OFFSET
    return (idx[:, 0] << (2 * KEY_BITS)) | (idx[:, 1] << KEY_BITS) | idx[:, 2]


def unpack_keys(keys) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64).ravel()
    x = (keys >> (2 * KEY_BITS)) & KEY_MASK
    y = (keys >> KEY_BITS) & KEY_MASK
    z = keys & KEY_MASK
    return np.stack([x, y, z], axis=1) - KEY_OFFSET


@dataclass
class Frame:
    """Posed RGB-D frame; depth is range along each pixel ray, 0 or non-finite = no return."""

    pose: Pose
    rgb: np.ndarray
    depth: np.ndarray
    intrinsics: Intrinsics

    def validate(self) -> None:
        self.intrinsics.validate()
        h, w = self.depth.shape
        if self.rgb.shape != (h, w, 3):
            raise MapError(f"rgb shape {self.rgb.shape} does not match depth {self.depth.shape}")
        if (h, w) != (self.intrinsics.height, self.intrinsics.width):
            raise MapError(f"image {w}x{h} does not match intrinsics "
                           f"{self.intrinsics.width}x{self.intrinsics.height}")
        if not self.pose.is_orthonormal():
            raise MapError("pose rotation is not orthonormal")


@dataclass
class View:
    """Probe geometry: panoramic (one ray per lattice bin) or a pinhole raster."""

    kind: str
    axis: Optional[np.ndarray] = None
    intrinsics: Optional[Intrinsics] = None

    @classmethod
    def panoramic(cls) -> "View":
        return cls("panoramic")

    @classmethod
    def pinhole(cls, axis, intrinsics: Intrinsics) -> "View":
        return cls("pinhole", normalize(np.asarray(axis, dtype=np.float64).reshape(3)), intrinsics)


@dataclass
class Probe:
    """Result of casting probe rays from one position."""

    unknown_cells: np.ndarray
    voxel_keys: np.ndarray
    voxel_dirs: np.ndarray
    voxel_depths: np.ndarray


@njit(cache=True)
def _flat(i0, i1, i2, dims):
    return (i0 * dims[1] + i1) * dims[2] + i2


@njit(cache=True)
def carve_kernel(occ, gmin, cell, dims, o, dirs, limits):
    carved = 0
    for r in range(dirs.shape[0]):
        state = ray_setup(gmin, cell, dims, o[0], o[1], o[2], dirs[r, 0], dirs[r, 1], dirs[r, 2])
        if not state[0]:
            continue
        t = state[1]
        i0, i1, i2 = state[2], state[3], state[4]
        s0, s1, s2 = state[5], state[6], state[7]
        tm0, tm1, tm2 = state[8], state[9], state[10]
        td0, td1, td2 = state[11], state[12], state[13]
        limit = limits[r]
        while t < limit:
            if i0 < 0 or i1 < 0 or i2 < 0 or i0 >= dims[0] or i1 >= dims[1] or i2 >= dims[2]:
                break
            f = _flat(i0, i1, i2, dims)
            # occupied is absorbing
            if occ[f] == 0:
                occ[f] = 1
                carved += 1
            t, i0, i1, i2, tm0, tm1, tm2 = ray_step(i0, i1, i2, s0, s1, s2, tm0, tm1, tm2, td0, td1, td2)
    return carved


@njit(cache=True)
def probe_kernel(occ, gmin, cell, dims, o, dirs, max_range, g_mark, v_mark):
    for r in range(dirs.shape[0]):
        state = ray_setup(gmin, cell, dims, o[0], o[1], o[2], dirs[r, 0], dirs[r, 1], dirs[r, 2])
        if not state[0]:
            continue
        t = state[1]
        i0, i1, i2 = state[2], state[3], state[4]
        s0, s1, s2 = state[5], state[6], state[7]
        tm0, tm1, tm2 = state[8], state[9], state[10]
        td0, td1, td2 = state[11], state[12], state[13]
        while t < max_range:
            if i0 < 0 or i1 < 0 or i2 < 0 or i0 >= dims[0] or i1 >= dims[1] or i2 >= dims[2]:
                break
            f = _flat(i0, i1, i2, dims)
            s = occ[f]
            if s == 2:
                v_mark[f] = 1
                break
            if s == 0:
                g_mark[f] = 1
            t, i0, i1, i2, tm0, tm1, tm2 = ray_step(i0, i1, i2, s0, s1, s2, tm0, tm1, tm2, td0, td1, td2)


@njit(cache=True)
def bfs_kernel(occ, dims, start, dist):
    n = occ.shape[0]
    for i in range(n):
        dist[i] = -1
    queue = np.empty(n, dtype=np.int64)
    head = 0
    tail = 0
    dist[start] = 0
    queue[tail] = start
    tail += 1
    plane = dims[1] * dims[2]
    while head < tail:
        f = queue[head]
        head += 1
        i0 = f // plane
        i1 = (f % plane) // dims[2]
        i2 = f % dims[2]
        for k in range(6):
            j0, j1, j2 = i0, i1, i2
            if k == 0:
                j0 -= 1
            elif k == 1:
                j0 += 1
            elif k == 2:
                j1 -= 1
            elif k == 3:
                j1 += 1
            elif k == 4:
                j2 -= 1
            else:
                j2 += 1
            if j0 < 0 or j1 < 0 or j2 < 0 or j0 >= dims[0] or j1 >= dims[1] or j2 >= dims[2]:
                continue
            g = (j0 * dims[1] + j1) * dims[2] + j2
            if occ[g] == 1 and dist[g] < 0:
                dist[g] = dist[f] + 1
                queue[tail] = g
                tail += 1


class WorldMap:
    """
    Sparse voxel-statistics map over a dense coarse occupancy grid.

    Stats voxel keys are world-aligned (floor(p / voxel_size)); occupancy cells
    are aligned to bounds_min, which must be a multiple of cell_size so every
    stats voxel sits inside exactly one cell.
    """

    def __init__(self, bounds_min, bounds_max, lattice: Lattice,
                 voxel_size: float = 0.05, cell_size: float = 0.20, max_range: float = 4.0):
        self.bounds_min = np.asarray(bounds_min, dtype=np.float64).reshape(3)
        self.bounds_max = np.asarray(bounds_max, dtype=np.float64).reshape(3)
        if np.any(self.bounds_max <= self.bounds_min):
            raise MapError(f"empty bounds {self.bounds_min} .. {self.bounds_max}")
        ratio = cell_size / voxel_size
        if voxel_size <= 0 or abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise MapError(f"cell_size {cell_size} must be a whole multiple of voxel_size {voxel_size}")
        steps = self.bounds_min / cell_size
        if np.any(np.abs(steps - np.round(steps)) > 1e-9):
            raise MapError(f"bounds_min {self.bounds_min} is not aligned to cell_size {cell_size}")
        self.lattice = lattice
        self.voxel_size = float(voxel_size)
        self.cell_size = float(cell_size)
        self.max_range = float(max_range)
        self.dims = np.ceil((self.bounds_max - self.bounds_min) / cell_size - 1e-9).astype(np.int64)
        self.occupancy = np.zeros(int(np.prod(self.dims)), dtype=np.uint8)
        self.stats = StatsTable(lattice.n_bins)
        self.cell_members: Dict[int, List[int]] = {}
        self.frames_ingested = 0

    # --- indexing ----------------------------------------------------------

    def in_bounds(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.all((p >= self.bounds_min) & (p < self.bounds_max), axis=1)

    def voxel_keys(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return pack_keys(np.floor(p / self.voxel_size).astype(np.int64))

    def voxel_centers(self, keys) -> np.ndarray:
        return (unpack_keys(keys) + 0.5) * self.voxel_size

    def cell_index(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        idx = np.floor((p - self.bounds_min) / self.cell_size).astype(np.int64)
        return np.clip(idx, 0, self.dims - 1)

    def flat_cells(self, points) -> np.ndarray:
        idx = self.cell_index(points)
        return (idx[:, 0] * self.dims[1] + idx[:, 1]) * self.dims[2] + idx[:, 2]

    def cell_centers(self, flat) -> np.ndarray:
        flat = np.asarray(flat, dtype=np.int64).ravel()
        plane = self.dims[1] * self.dims[2]
        idx = np.stack([flat // plane, (flat % plane) // self.dims[2], flat % self.dims[2]], axis=1)
        return self.bounds_min + (idx + 0.5) * self.cell_size

    def state_at(self, point) -> CellState:
        p = np.asarray(point, dtype=np.float64).reshape(1, 3)
        if not self.in_bounds(p)[0]:
            return CellState.UNKNOWN
        return CellState(int(self.occupancy[self.flat_cells(p)[0]]))

    def free_cells(self) -> np.ndarray:
        return np.flatnonzero(self.occupancy == FREE)

    def counts(self) -> Dict:
        return {
            "voxels": len(self.stats),
            "unknown": int(np.count_nonzero(self.occupancy == UNKNOWN)),
            "free": int(np.count_nonzero(self.occupancy == FREE)),
            "occupied": int(np.count_nonzero(self.occupancy == OCCUPIED)),
        }

    def _require_free(self, position, what: str = "position") -> np.ndarray:
        p = np.asarray(position, dtype=np.float64).reshape(3)
        state = self.state_at(p)
        if state != CellState.FREE:
            raise UnreachableError(f"{what} {np.round(p, 3).tolist()} is in a {state.name.lower()} cell")
        return p

    def _register_voxels(self, keys: np.ndarray) -> int:
        """Mark enclosing cells occupied and index new voxels by cell."""
        if len(keys) == 0:
            return 0
        cells = self.flat_cells(self.voxel_centers(keys))
        newly = int(np.count_nonzero(self.occupancy[cells] != OCCUPIED))
        self.occupancy[cells] = OCCUPIED
        for key, cell in zip(keys.tolist(), cells.tolist()):
            self.cell_members.setdefault(cell, []).append(key)
        return newly


def ingest_frame(world: WorldMap, frame: Frame, workers: int = 1) -> Dict:
    """
    Fold one posed RGB-D frame into both maps.

    Args:
        world: map to update in place.
        frame: posed frame; depth is range along the pixel ray.
        workers: >1 folds disjoint voxel rows on that many threads; the
            table ends up byte-identical to a single-threaded ingest.

    Returns:
        Dict with pixel, voxel and cell counts of this ingestion.
    """
    frame.validate()
    origin = np.asarray(frame.pose.position, dtype=np.float64)
    if not world.in_bounds(origin)[0]:
        raise MapError(f"pose {origin.tolist()} lies outside the map bounds")

    rays = pixel_rays(frame.pose, frame.intrinsics)
    depth = np.asarray(frame.depth, dtype=np.float64).ravel()
    rgb = np.asarray(frame.rgb, dtype=np.float64).reshape(-1, 3)
    valid = np.isfinite(depth) & (depth > 0.0)
    points = origin + rays[valid] * depth[valid, None]
    inside = world.in_bounds(points)
    points = points[inside]
    sel = np.flatnonzero(valid)[inside]
    keys = world.voxel_keys(points)
    offsets = points - origin
    ranges = np.linalg.norm(offsets, axis=1)
    dirs = offsets / ranges[:, None]

    before = len(world.stats)
    if workers > 1 and len(keys) > workers:
        report = _ingest_partitioned(world, keys, dirs, rgb[sel], ranges, workers)
    else:
        report = world.stats.update_samples(world.lattice, keys, dirs, rgb[sel], ranges)

    fresh = world.stats.row_keys[before: len(world.stats)].copy()
    occupied = world._register_voxels(fresh)

    limits = np.where(valid, depth, world.max_range)
    limits = np.minimum(limits, world.max_range)
    camera_cell = world.flat_cells(origin)[0]
    carved = 0
    if world.occupancy[camera_cell] == UNKNOWN:
        world.occupancy[camera_cell] = FREE
        carved += 1
    carved += int(carve_kernel(world.occupancy, world.bounds_min, world.cell_size, world.dims,
                               origin, np.ascontiguousarray(rays), np.ascontiguousarray(limits)))
    world.frames_ingested += 1

    if report["clamped"]:
        logger.warning("frame %d: %d rgb samples outside [0, 1] clamped",
                       world.frames_ingested, report["clamped"])
    result = {
        "pixels": int(depth.size),
        "valid_pixels": int(np.count_nonzero(valid)),
        "out_of_bounds": int(len(inside) - np.count_nonzero(inside)),
        "samples": report["samples"],
        "voxels_touched": report["voxels"],
        "new_voxels": int(len(fresh)),
        "cells_occupied": occupied,
        "cells_carved": carved,
        "clamped": report["clamped"],
        "rejected": report["rejected"],
    }
    logger.debug("ingest %s", result)
    return result


def _ingest_partitioned(world: WorldMap, keys, dirs, rgbs, ranges, workers: int) -> Dict:
    # rows are reserved up front; each thread owns a disjoint row set and
    # folds its samples in frame order, so the result equals a serial pass
    (rows, bins, colors, depths), report = world.stats.prepare_samples(world.lattice, keys, dirs, rgbs, ranges)
    owner = rows % workers

    def work(i):
        part = owner == i
        world.stats.apply_samples(rows[part], bins[part], colors[part], depths[part])

    threads = [threading.Thread(target=work, args=(i,), daemon=True) for i in range(workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return report


def probe_directions(view: View, pano_lattice: Optional[Lattice]) -> np.ndarray:
    if view.kind == "panoramic":
        if pano_lattice is None:
            raise MapError("panoramic probing needs the panoramic lattice")
        return np.ascontiguousarray(pano_lattice.centers)
    if view.kind == "pinhole":
        pose = Pose.look_along(np.zeros(3), view.axis)
        return np.ascontiguousarray(pixel_rays(pose, view.intrinsics))
    raise MapError(f"unknown view kind {view.kind!r}")


def probe(world: WorldMap, position, view: View, max_range: Optional[float] = None,
          pano_lattice: Optional[Lattice] = None) -> Probe:
    """Cast the view's rays once and collect both G and V."""
    origin = world._require_free(position)
    max_range = world.max_range if max_range is None else float(max_range)
    dirs = probe_directions(view, pano_lattice)
    g_mark = np.zeros(world.occupancy.shape, dtype=np.uint8)
    v_mark = np.zeros(world.occupancy.shape, dtype=np.uint8)
    probe_kernel(world.occupancy, world.bounds_min, world.cell_size, world.dims,
                 origin, dirs, max_range, g_mark, v_mark)
    unknown = np.flatnonzero(g_mark)
    hit_cells = np.flatnonzero(v_mark)
    members = [world.cell_members.get(c, ()) for c in hit_cells.tolist()]
    keys = np.array(sorted(k for group in members for k in group), dtype=np.int64)
    centers = world.voxel_centers(keys)
    offsets = centers - origin
    depths = np.linalg.norm(offsets, axis=1)
    dirs_v = offsets / np.where(depths > 0, depths, 1.0)[:, None]
    if view.kind == "pinhole" and len(keys):
        pose = Pose.look_along(origin, view.axis)
        keep = in_frustum(pose, view.intrinsics, centers)
        keys, dirs_v, depths = keys[keep], dirs_v[keep], depths[keep]
    return Probe(unknown_cells=unknown, voxel_keys=keys, voxel_dirs=dirs_v, voxel_depths=depths)


def visible_voxels(world: WorldMap, position, view: View, max_range: Optional[float] = None,
                   pano_lattice: Optional[Lattice] = None) -> Probe:
    """V: stats voxels of the first occupied cell along each probe ray (G left empty)."""
    p = probe(world, position, view, max_range, pano_lattice)
    return Probe(np.empty(0, dtype=np.int64), p.voxel_keys, p.voxel_dirs, p.voxel_depths)


def visible_unknown_cells(world: WorldMap, position, view: View, max_range: Optional[float] = None,
                          pano_lattice: Optional[Lattice] = None) -> np.ndarray:
    """G: unknown cells crossed by probe rays before the first occupied cell."""
    return probe(world, position, view, max_range, pano_lattice).unknown_cells


def distance_field(world: WorldMap, start) -> np.ndarray:
    """6-connected hop count over free cells from start; -1 where unreachable."""
    p = world._require_free(start, "path start")
    dist = np.empty(world.occupancy.shape, dtype=np.int64)
    bfs_kernel(world.occupancy, world.dims, int(world.flat_cells(p)[0]), dist)
    return dist


def path_cost(world: WorldMap, start, goal, field: Optional[np.ndarray] = None) -> Optional[float]:
    """Shortest free-cell path length in meters, or None when unreachable."""
    g = world._require_free(goal, "path goal")
    if field is None:
        field = distance_field(world, start)
    hops = int(field[world.flat_cells(g)[0]])
    if hops < 0:
        return None
    return hops * world.cell_size


def shortest_path(world: WorldMap, start, goal) -> List[np.ndarray]:
    """Cell centers from start to goal inclusive; empty when unreachable."""
    field = distance_field(world, start)
    g = world._require_free(goal, "path goal")
    current = int(world.flat_cells(g)[0])
    if field[current] < 0:
        return []
    d0, d1, d2 = (int(v) for v in world.dims)
    plane = d1 * d2
    cells = [current]
    while field[current] > 0:
        i0, i1, i2 = current // plane, (current % plane) // d2, current % d2
        options = []
        for j0, j1, j2 in ((i0 - 1, i1, i2), (i0 + 1, i1, i2), (i0, i1 - 1, i2),
                           (i0, i1 + 1, i2), (i0, i1, i2 - 1), (i0, i1, i2 + 1)):
            if 0 <= j0 < d0 and 0 <= j1 < d1 and 0 <= j2 < d2:
                f = (j0 * d1 + j1) * d2 + j2
                if field[f] == field[current] - 1:
                    options.append(f)
        current = min(options)
        cells.append(current)
    cells.reverse()
    centers = world.cell_centers(cells)
    return [c for c in centers]

