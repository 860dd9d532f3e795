"""
Simulator Module
Synthetic voxel scenes, a pinhole RGB-D renderer, the exploration episode loop
and the novel-view evaluation that relates renderability to image error.
"""

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, TextIO

import numpy as np
from scipy import stats as sps

from ._jit import njit
from .errors import PlannerStallError, SceneError
from .fibsphere import Lattice
from .geometry import Intrinsics, Pose, pixel_rays, ray_setup, ray_step
from .host_info import rss_bytes
from .planner import CandidateScore, PlannerConfig, select_nbv
from .renderability import batch_renderability, renderability_table
from .world_map import Frame, WorldMap, ingest_frame, pack_keys, shortest_path

logger = logging.getLogger(__name__)

SCENE_HEADER = "# renderability scene v1"
PSNR_CAP = 100.0
AXES = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0],
                 [0.0, -1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])
TRAJECTORY_COLUMNS = ("step", "kind", "x", "y", "z", "dx", "dy", "dz", "u_g", "u_r", "u_path", "u_view")


@dataclass
class Scene:
    """
    Dense voxel scene anchored at the world origin.

    grid holds material index + 1 per voxel (0 = empty); material arrays are
    indexed by material index.
    """

    name: str
    bounds_max: np.ndarray
    voxel_size: float
    grid: np.ndarray
    albedo: np.ndarray
    strength: np.ndarray
    spec_dir: np.ndarray
    exponent: np.ndarray
    background: np.ndarray
    start: np.ndarray
    start_axis: np.ndarray
    seed: int = 0

    @property
    def bounds_min(self) -> np.ndarray:
        return np.zeros(3)

    @property
    def dims(self) -> np.ndarray:
        return np.array(self.grid.shape, dtype=np.int64)

    @property
    def n_materials(self) -> int:
        return len(self.strength)

    def validate(self) -> None:
        if self.grid.ndim != 3 or self.grid.max(initial=0) > self.n_materials:
            raise SceneError(f"scene {self.name!r}: voxel material out of range")
        arrays = (self.albedo, self.strength, self.spec_dir, self.exponent, self.background)
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise SceneError(f"scene {self.name!r}: non-finite material parameters")
        if np.any(self.albedo < 0) or np.any(self.albedo > 1) or np.any(self.strength < 0) or np.any(self.strength > 1):
            raise SceneError(f"scene {self.name!r}: albedo and specular strength must lie in [0, 1]")
        if np.any(self.exponent < 1):
            raise SceneError(f"scene {self.name!r}: specular exponent must be >= 1")
        if self.is_solid(self.start):
            raise SceneError(f"scene {self.name!r}: start {self.start.tolist()} is inside geometry")

    def voxel_index(self, point) -> np.ndarray:
        return np.floor(np.asarray(point, dtype=np.float64).reshape(-1, 3) / self.voxel_size).astype(np.int64)

    def is_solid(self, point) -> bool:
        idx = self.voxel_index(point)[0]
        if np.any(idx < 0) or np.any(idx >= self.dims):
            return False
        return bool(self.grid[tuple(idx)] > 0)

    def contains(self, point) -> bool:
        p = np.asarray(point, dtype=np.float64).reshape(3)
        return bool(np.all(p >= 0.0) and np.all(p < self.bounds_max))

    def voxel_count(self) -> int:
        return int(np.count_nonzero(self.grid))

    def surface_voxels(self):
        """
        Solid voxels with at least one empty in-bounds face neighbor.

        Returns:
            (packed keys, outward unit normal per voxel), normal = first empty
            neighbor in -x, +x, -y, +y, -z, +z order.
        """
        solid = self.grid > 0
        padded = np.pad(solid, 1, constant_values=True)
        normals = np.zeros(solid.shape + (3,))
        found = np.zeros(solid.shape, dtype=bool)
        for normal in AXES[[1, 0, 3, 2, 5, 4]]:
            neighbor = padded[tuple(slice(1 + int(n), 1 + int(n) + solid.shape[a]) for a, n in enumerate(normal))]
            exposed = solid & ~neighbor & ~found
            normals[exposed] = normal
            found |= exposed
        idx = np.argwhere(found)
        return pack_keys(idx), normals[found]


class _Builder:
    def __init__(self, name: str, size, seed: int, voxel_size: float = 0.05):
        self.name = name
        self.size = np.asarray(size, dtype=np.float64)
        self.voxel = voxel_size
        self.rng = np.random.default_rng(seed)
        self.seed = seed
        self.grid = np.zeros(tuple(np.round(self.size / voxel_size).astype(int)), dtype=np.int32)
        self.materials: List[tuple] = []

    def lambertian(self) -> int:
        return self.material(self.rng.uniform(0.2, 0.9, size=3))

    def specular(self, normal) -> int:
        tilt = np.asarray(normal, dtype=np.float64) + self.rng.normal(scale=0.2, size=3)
        return self.material(self.rng.uniform(0.1, 0.5, size=3), float(self.rng.uniform(0.5, 0.9)),
                             tilt / np.linalg.norm(tilt), float(self.rng.choice([8.0, 16.0, 32.0])))

    def material(self, albedo, strength: float = 0.0, spec_dir=(0.0, 0.0, 1.0), exponent: float = 1.0) -> int:
        self.materials.append((np.asarray(albedo, dtype=np.float64), strength,
                               np.asarray(spec_dir, dtype=np.float64), exponent))
        return len(self.materials) - 1

    def box(self, lo, hi, material: int) -> None:
        a = np.round(np.asarray(lo) / self.voxel).astype(int)
        b = np.round(np.asarray(hi) / self.voxel).astype(int)
        a = np.clip(a, 0, self.grid.shape)
        b = np.clip(b, 0, self.grid.shape)
        self.grid[a[0]:b[0], a[1]:b[1], a[2]:b[2]] = material + 1

    def clear(self, lo, hi) -> None:
        a = np.round(np.asarray(lo) / self.voxel).astype(int)
        b = np.round(np.asarray(hi) / self.voxel).astype(int)
        self.grid[a[0]:b[0], a[1]:b[1], a[2]:b[2]] = 0

    def shell(self) -> None:
        """One-voxel walls, floor and ceiling on the bounds faces."""
        sx, sy, sz = self.size
        t = self.voxel
        faces = [((0, 0, 0), (t, sy, sz)), ((sx - t, 0, 0), (sx, sy, sz)),
                 ((0, 0, 0), (sx, t, sz)), ((0, sy - t, 0), (sx, sy, sz)),
                 ((0, 0, 0), (sx, sy, t)), ((0, 0, sz - t), (sx, sy, sz))]
        for lo, hi in faces:
            self.box(lo, hi, self.lambertian())

    def clutter(self, count: int, keep_out: List[tuple], region_lo, region_hi, specular_every: int = 0) -> None:
        # blocks on the 0.2 m grid, standing on the floor
        placed = 0
        attempts = 0
        while placed < count and attempts < 200:
            attempts += 1
            x = 0.2 * self.rng.integers(round(region_lo[0] / 0.2), round(region_hi[0] / 0.2) - 1)
            y = 0.2 * self.rng.integers(round(region_lo[1] / 0.2), round(region_hi[1] / 0.2) - 1)
            h = 0.2 * self.rng.integers(2, 5)
            lo, hi = (x, y, self.voxel), (x + 0.4, y + 0.4, h)
            if any(_overlaps(lo, hi, k_lo, k_hi) for k_lo, k_hi in keep_out):
                continue
            if specular_every and placed % specular_every == specular_every - 1:
                mat = self.specular((1.0, 1.0, 0.0))
            else:
                mat = self.lambertian()
            self.box(lo, hi, mat)
            placed += 1

    def build(self, start, start_axis=(1.0, 0.0, 0.0), background=(0.0, 0.0, 0.0)) -> Scene:
        albedo, strength, spec_dir, exponent = zip(*self.materials)
        scene = Scene(
            name=self.name,
            bounds_max=self.size.copy(),
            voxel_size=self.voxel,
            grid=self.grid,
            albedo=np.array(albedo),
            strength=np.array(strength, dtype=np.float64),
            spec_dir=np.array(spec_dir),
            exponent=np.array(exponent, dtype=np.float64),
            background=np.asarray(background, dtype=np.float64),
            start=np.asarray(start, dtype=np.float64),
            start_axis=np.asarray(start_axis, dtype=np.float64),
            seed=self.seed,
        )
        scene.validate()
        return scene


def _overlaps(a_lo, a_hi, b_lo, b_hi) -> bool:
    return all(a_lo[i] < b_hi[i] and b_lo[i] < a_hi[i] for i in range(3))


def _box_room(seed: int, voxel_size: float) -> Scene:
    b = _Builder("box_room", (3.2, 3.2, 2.0), seed, voxel_size)
    b.shell()
    start = (1.5, 1.5, 1.1)
    b.clutter(4, [((1.2, 1.2, 0.0), (1.8, 1.8, 2.0))], (0.4, 0.4), (2.8, 2.8))
    return b.build(start)


def _two_rooms(seed: int, voxel_size: float) -> Scene:
    b = _Builder("two_rooms", (4.8, 2.4, 2.0), seed, voxel_size)
    v = b.voxel
    b.shell()
    # partition with a doorway
    b.box((2.4, 0.0, 0.0), (2.4 + v, 2.4, 2.0), b.lambertian())
    b.clear((2.4, 0.8, v), (2.4 + v, 1.6, 1.6))
    b.box((4.8 - v, 0.6, 0.4), (4.8, 1.8, 1.6), b.specular((-1.0, 0.0, 0.0)))
    start = (1.1, 1.1, 1.1)
    keep_out = [((0.8, 0.8, 0.0), (1.4, 1.4, 2.0)), ((2.0, 0.6, 0.0), (2.8, 1.8, 2.0))]
    b.clutter(2, keep_out, (0.4, 0.2), (2.2, 2.2))
    b.clutter(2, keep_out, (2.6, 0.2), (4.6, 2.2), specular_every=2)
    return b.build(start)


def _specular_gallery(seed: int, voxel_size: float) -> Scene:
    b = _Builder("specular_gallery", (4.0, 4.0, 2.0), seed, voxel_size)
    v = b.voxel
    floor, ceiling = b.lambertian(), b.lambertian()
    b.box((0, 0, 0), (4.0, 4.0, v), floor)
    b.box((0, 0, 2.0 - v), (4.0, 4.0, 2.0), ceiling)
    walls = [((0.0, None), (1.0, 0.0, 0.0), 0), ((4.0 - v, None), (-1.0, 0.0, 0.0), 0),
             ((None, 0.0), (0.0, 1.0, 0.0), 1), ((None, 4.0 - v), (0.0, -1.0, 0.0), 1)]
    for (fx, fy), normal, along in walls:
        # alternating 0.8 m panels
        for i, start in enumerate(np.arange(0.0, 4.0, 0.8)):
            mat = b.specular(normal) if i % 2 else b.lambertian()
            if along == 0:
                b.box((fx, start, v), (fx + v, start + 0.8, 2.0 - v), mat)
            else:
                b.box((start, fy, v), (start + 0.8, fy + v, 2.0 - v), mat)
    for i, (x, y) in enumerate(((1.2, 1.2), (2.4, 1.2), (1.2, 2.4), (2.4, 2.4))):
        mat = b.specular((1.0, 1.0, 0.0)) if i % 2 == 0 else b.lambertian()
        b.box((x, y, v), (x + 0.4, y + 0.4, 2.0 - v), mat)
    return b.build((1.9, 1.9, 1.1))


PRESETS: Dict[str, Callable[[int, float], Scene]] = {
    "box_room": _box_room,
    "two_rooms": _two_rooms,
    "specular_gallery": _specular_gallery,
}


def build_scene(name: str, seed: int = 0, voxel_size: float = 0.05) -> Scene:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise SceneError(f"unknown scene preset {name!r}; choose from {sorted(PRESETS)}") from None
    if not (0.0 < voxel_size <= 0.2) or abs(0.2 / voxel_size - round(0.2 / voxel_size)) > 1e-9:
        raise SceneError(f"voxel_size {voxel_size} must divide the 0.2 m layout grid")
    scene = factory(int(seed), float(voxel_size))
    logger.info("scene %s seed=%d: %d voxels, %d materials", name, seed, scene.voxel_count(), scene.n_materials)
    return scene


# --- rendering -------------------------------------------------------------------

@njit(cache=True)
def render_kernel(grid, dims, voxel, gmin, albedo, strength, spec_dir, exponent, background, o, rays, rgb, depth):
    for r in range(rays.shape[0]):
        d0 = rays[r, 0]
        d1 = rays[r, 1]
        d2 = rays[r, 2]
        rgb[r, 0] = background[0]
        rgb[r, 1] = background[1]
        rgb[r, 2] = background[2]
        depth[r] = 0.0
        state = ray_setup(gmin, voxel, dims, o[0], o[1], o[2], d0, d1, d2)
        if not state[0]:
            continue
        t = state[1]
        i0, i1, i2 = state[2], state[3], state[4]
        s0, s1, s2 = state[5], state[6], state[7]
        tm0, tm1, tm2 = state[8], state[9], state[10]
        td0, td1, td2 = state[11], state[12], state[13]
        while True:
            if i0 < 0 or i1 < 0 or i2 < 0 or i0 >= dims[0] or i1 >= dims[1] or i2 >= dims[2]:
                break
            m = grid[(i0 * dims[1] + i1) * dims[2] + i2]
            if m > 0:
                k = m - 1
                t_exit = min(tm0, min(tm1, tm2))
                # mid-range inside the hit voxel
                depth[r] = 0.5 * (t + t_exit)
                dot = -(d0 * spec_dir[k, 0] + d1 * spec_dir[k, 1] + d2 * spec_dir[k, 2])
                spec = 0.0
                if dot > 0.0 and strength[k] > 0.0:
                    spec = strength[k] * dot ** exponent[k]
                for c in range(3):
                    v = albedo[k, c] + spec
                    if v > 1.0:
                        v = 1.0
                    rgb[r, c] = v
                break
            t, i0, i1, i2, tm0, tm1, tm2 = ray_step(i0, i1, i2, s0, s1, s2, tm0, tm1, tm2, td0, td1, td2)


def render_rgbd(scene: Scene, pose: Pose, intrinsics: Intrinsics) -> Frame:
    """Ground-truth RGB-D frame; depth is range along each pixel ray, 0 on a miss."""
    position = np.asarray(pose.position, dtype=np.float64)
    if not scene.contains(position):
        raise SceneError(f"camera {position.tolist()} is outside the scene bounds")
    if scene.is_solid(position):
        raise SceneError(f"camera {position.tolist()} is inside geometry")
    rays = np.ascontiguousarray(pixel_rays(pose, intrinsics))
    rgb = np.empty((len(rays), 3), dtype=np.float64)
    depth = np.empty(len(rays), dtype=np.float64)
    render_kernel(np.ascontiguousarray(scene.grid.ravel()), scene.dims, scene.voxel_size, scene.bounds_min,
                  scene.albedo, scene.strength, scene.spec_dir, scene.exponent, scene.background,
                  position, rays, rgb, depth)
    h, w = intrinsics.height, intrinsics.width
    return Frame(pose=pose, rgb=rgb.reshape(h, w, 3), depth=depth.reshape(h, w), intrinsics=intrinsics)


# --- episodes ----------------------------------------------------------------------

@dataclass
class Budget:
    max_views: int = 20
    max_seconds: Optional[float] = None

    def exhausted(self, views: int, elapsed: float) -> Optional[str]:
        if views >= self.max_views:
            return "max_views"
        if self.max_seconds is not None and elapsed >= self.max_seconds:
            return "max_seconds"
        return None


@dataclass
class EpisodeResult:
    trajectory: List[Pose]
    steps: List[Dict]
    timings: List[Dict]
    stalled: bool
    stop_reason: str
    metrics: Dict = field(default_factory=dict)
    world: Optional[WorldMap] = field(default=None, repr=False)

    @property
    def frames_captured(self) -> int:
        return len(self.trajectory)


def world_for_scene(scene: Scene, lattice: Lattice, cell_size: float = 0.2, max_range: float = 4.0) -> WorldMap:
    return WorldMap(scene.bounds_min, scene.bounds_max, lattice, voxel_size=scene.voxel_size,
                    cell_size=cell_size, max_range=max_range)


def _row(step: int, kind: str, pose: Pose, score: Optional[CandidateScore]) -> Dict:
    row = {"step": step, "kind": kind}
    row.update(zip(("x", "y", "z"), (float(v) for v in pose.position)))
    row.update(zip(("dx", "dy", "dz"), (float(v) for v in pose.axis)))
    if score is None:
        row.update({"u_g": 0, "u_r": 0.0, "u_path": 0.0, "u_view": 0.0})
    else:
        row.update({"u_g": int(score.u_g), "u_r": float(score.u_r),
                    "u_path": float(score.u_path), "u_view": float(score.u_view)})
    return row


def run_episode(scene: Scene, world: WorldMap, cfg: PlannerConfig, intrinsics: Intrinsics, budget: Budget,
                pano_lattice: Optional[Lattice] = None, capture_every: int = 0, workers: int = 1,
                log: Optional[TextIO] = None) -> EpisodeResult:
    """
    Capture, ingest and plan until the budget runs out or the planner stalls.

    capture_every > 0 also captures at every m-th cell of the path to each
    chosen pose, looking along the chosen axis.
    """
    cfg.validate()
    if cfg.mode == "panoramic" and (pano_lattice is None or pano_lattice.fov_sets is None):
        raise SceneError("panoramic planning needs a panoramic lattice with FoV sets")
    rng = np.random.default_rng(cfg.rng_seed)
    peak_rss = rss_bytes()

    trajectory: List[Pose] = []
    steps: List[Dict] = []
    timings: List[Dict] = []
    queue = [(Pose.look_along(scene.start, scene.start_axis), None, "start", 0.0)]
    stalled = False
    stop_reason = "max_views"
    started = time.perf_counter()
    plan_step = 0

    while queue:
        pose, score, kind, plan_ms = queue.pop(0)
        frame = render_rgbd(scene, pose, intrinsics)
        tick = time.perf_counter()
        report = ingest_frame(world, frame, workers=workers)
        ingest_ms = (time.perf_counter() - tick) * 1e3
        trajectory.append(pose)
        steps.append(_row(len(trajectory) - 1, kind, pose, score))
        timings.append({"step": len(trajectory) - 1, "ingest_ms": ingest_ms, "plan_ms": plan_ms,
                        "voxels": len(world.stats), "new_voxels": report["new_voxels"]})
        peak_rss = max(peak_rss, rss_bytes())

        reason = budget.exhausted(len(trajectory), time.perf_counter() - started)
        if reason is not None:
            stop_reason = reason
            break
        if queue:
            continue

        tick = time.perf_counter()
        try:
            decision = select_nbv(world, pano_lattice, pose.position, cfg, rng, step=plan_step, log=log)
        except PlannerStallError as exc:
            logger.warning("episode stalled after %d views: %s", len(trajectory), exc)
            stalled = True
            stop_reason = "stalled"
            break
        plan_ms = (time.perf_counter() - tick) * 1e3
        plan_step += 1
        target = decision.pose()
        if capture_every > 0:
            path = shortest_path(world, pose.position, target.position)
            for waypoint in path[capture_every:-1:capture_every]:
                queue.append((Pose.look_along(waypoint, target.axis), None, "waypoint", 0.0))
        queue.append((target, decision.score, "nbv", plan_ms))

    result = EpisodeResult(trajectory, steps, timings, stalled, stop_reason, world=world)
    result.metrics = episode_metrics(scene, world, result, peak_rss)
    logger.info("episode on %s: %d views, stop=%s, coverage=%.3f, mean_R=%.3f", scene.name,
                result.frames_captured, stop_reason, result.metrics["coverage"], result.metrics["mean_r_surface"])
    return result


def surface_renderability(scene: Scene, world: WorldMap, distance: float = 1.0) -> np.ndarray:
    """R of every scene surface voxel seen head-on along its normal from `distance`."""
    keys, normals = scene.surface_voxels()
    if len(keys) == 0:
        return np.empty(0)
    depths = np.full(len(keys), float(distance))
    return renderability_table(world, keys, np.ascontiguousarray(-normals), depths)[:, 6]


def episode_metrics(scene: Scene, world: WorldMap, result: EpisodeResult, peak_rss: int) -> Dict:
    keys, _ = scene.surface_voxels()
    rows = world.stats.rows_for(keys, create=False)
    observed = np.zeros(len(keys), dtype=bool)
    observed[rows >= 0] = world.stats.counts[rows[rows >= 0]] > 0
    r = surface_renderability(scene, world)

    positions = np.array([p.position for p in result.trajectory])
    cells = world.flat_cells(positions)
    distinct = len(np.unique(cells))
    ingest = [t["ingest_ms"] for t in result.timings]
    plan = [t["plan_ms"] for t in result.timings[1:] if t["plan_ms"] > 0]
    return {
        "frames_captured": result.frames_captured,
        "stalled": result.stalled,
        "stop_reason": result.stop_reason,
        "coverage": float(observed.mean()) if len(keys) else 0.0,
        "mean_r_surface": float(r.mean()) if len(r) else 0.0,
        "ingest_ms_mean": float(np.mean(ingest)) if ingest else 0.0,
        "plan_ms_mean": float(np.mean(plan)) if plan else 0.0,
        "map_voxels": len(world.stats),
        "map_bytes": world.stats.nbytes(),
        "bytes_per_voxel": world.stats.bytes_per_voxel,
        "peak_rss_mb": round(peak_rss / 2 ** 20, 2),
        "view_spread_m": float(np.mean(np.linalg.norm(positions - positions.mean(axis=0), axis=1))),
        "distinct_cells": distinct,
        "revisit_fraction": 1.0 - distinct / len(cells),
        **{f"cells_{k}": v for k, v in world.counts().items() if k != "voxels"},
    }


def replay(scene: Scene, poses: Sequence[Pose], world: WorldMap, intrinsics: Intrinsics) -> WorldMap:
    """Rebuild a map by re-rendering and ingesting recorded poses in order."""
    for pose in poses:
        ingest_frame(world, render_rgbd(scene, pose, intrinsics))
    return world


# --- evaluation --------------------------------------------------------------------

def eval_grid_poses(scene: Scene, step_cells: int = 3, cell_size: float = 0.2) -> List[Pose]:
    """Positions on a coarse grid of geometry-free cells, six axis-aligned views each."""
    dims = np.round(scene.bounds_max / cell_size).astype(int)
    per_cell = int(round(cell_size / scene.voxel_size))
    poses = []
    for i in range(1, dims[0] - 1, step_cells):
        for j in range(1, dims[1] - 1, step_cells):
            for k in range(1, dims[2] - 1, step_cells):
                block = scene.grid[i * per_cell:(i + 1) * per_cell, j * per_cell:(j + 1) * per_cell,
                                   k * per_cell:(k + 1) * per_cell]
                if np.any(block):
                    continue
                center = (np.array([i, j, k]) + 0.5) * cell_size
                poses.extend(Pose.look_along(center, axis) for axis in AXES)
    return poses


def eval_novel_views(scene: Scene, world: WorldMap, test_poses: Sequence[Pose], intrinsics: Intrinsics) -> Dict:
    """
    Compare a per-voxel mean-color prediction with ground truth on test views.

    Returns:
        Dict with per-view rows and a summary holding Spearman and Pearson
        correlations between mean(1 - R) and MSE. Views whose rays hit no
        geometry report mean_r None.
    """
    if len(test_poses) == 0:
        raise SceneError("the test pose set is empty")
    rows = []
    for view_id, pose in enumerate(test_poses):
        gt = render_rgbd(scene, pose, intrinsics)
        depth = gt.depth.ravel()
        hit = depth > 0.0
        pred = np.broadcast_to(scene.background, (depth.size, 3)).copy()
        mean_r = None
        keys = np.empty(0, dtype=np.int64)
        if np.any(hit):
            rays = pixel_rays(pose, intrinsics)[hit]
            keys = world.voxel_keys(pose.position + rays * depth[hit, None])
            rows_idx = world.stats.rows_for(keys, create=False)
            known = rows_idx >= 0
            known[known] = world.stats.counts[rows_idx[known]] > 0
            colors = pred[hit]
            colors[known] = world.stats.means[rows_idx[known]]
            pred[hit] = colors
            unique = np.unique(keys)
            mean_r = float(batch_renderability(world, unique, pose.position).mean())
        mse = float(np.mean((pred - gt.rgb.reshape(-1, 3)) ** 2))
        psnr = PSNR_CAP if mse <= 0.0 else min(PSNR_CAP, -10.0 * math.log10(mse))
        rows.append({
            "view": view_id,
            "x": float(pose.position[0]), "y": float(pose.position[1]), "z": float(pose.position[2]),
            "dx": float(pose.axis[0]), "dy": float(pose.axis[1]), "dz": float(pose.axis[2]),
            "n_visible": int(len(np.unique(keys))),
            "mean_r": mean_r,
            "mean_deficit": None if mean_r is None else 1.0 - mean_r,
            "mse": mse,
            "psnr": psnr,
        })
    return {"views": rows, "summary": correlation_summary(rows)}


def correlation_summary(rows: List[Dict]) -> Dict:
    """Error and renderability summary; views that see no geometry carry no R and are left out of the pairing."""
    scored = [r for r in rows if r["mean_deficit"] is not None]
    deficit = np.array([r["mean_deficit"] for r in scored], dtype=np.float64)
    mse = np.array([r["mse"] for r in scored], dtype=np.float64)
    summary = {
        "views": len(rows),
        "scored_views": len(scored),
        "mean_r": float(1.0 - deficit.mean()) if len(scored) else None,
        "mse_mean": float(np.mean([r["mse"] for r in rows])),
        "psnr_mean": float(np.mean([r["psnr"] for r in rows])),
        "spearman": None,
        "pearson": None,
    }
    if len(scored) >= 3 and np.ptp(deficit) > 0 and np.ptp(mse) > 0:
        summary["spearman"] = float(sps.spearmanr(deficit, mse)[0])
        summary["pearson"] = float(sps.pearsonr(deficit, mse)[0])
    return summary


def eval_prefixes(scene: Scene, trajectory: Sequence[Pose], make_world: Callable[[], WorldMap],
                  test_poses: Sequence[Pose], intrinsics: Intrinsics, prefixes: Sequence[int]) -> Dict[int, Dict]:
    """Evaluate maps rebuilt from the first k captured views for each k."""
    out = {}
    for k in sorted(set(int(p) for p in prefixes)):
        if k < 1 or k > len(trajectory):
            raise SceneError(f"prefix {k} outside 1..{len(trajectory)}")
        world = replay(scene, trajectory[:k], make_world(), intrinsics)
        out[k] = eval_novel_views(scene, world, test_poses, intrinsics)
        logger.info("prefix %d: spearman=%s mse=%.5f", k, out[k]["summary"]["spearman"], out[k]["summary"]["mse_mean"])
    return out


# --- files ---------------------------------------------------------------------------

def write_scene(scene: Scene, path: str) -> None:
    with open(path, "w") as f:
        f.write(SCENE_HEADER + "\n")
        f.write(f"name {scene.name}\nseed {scene.seed}\n")
        f.write("bounds {} {} {}\n".format(*scene.bounds_max.tolist()))
        f.write(f"voxel_size {scene.voxel_size!r}\n")
        f.write("background {} {} {}\n".format(*scene.background.tolist()))
        f.write("start {} {} {} {} {} {}\n".format(*scene.start.tolist(), *scene.start_axis.tolist()))
        for m in range(scene.n_materials):
            values = [*scene.albedo[m].tolist(), float(scene.strength[m]), *scene.spec_dir[m].tolist(),
                      float(scene.exponent[m])]
            f.write(f"material {m} " + " ".join(repr(v) for v in values) + "\n")
        for i, j, k in np.argwhere(scene.grid > 0).tolist():
            f.write(f"voxel {i} {j} {k} {int(scene.grid[i, j, k]) - 1}\n")


def read_scene(path: str) -> Scene:
    fields: Dict[str, List[str]] = {}
    materials: Dict[int, List[float]] = {}
    voxels: List[List[int]] = []
    with open(path) as f:
        if f.readline().strip() != SCENE_HEADER:
            raise SceneError(f"{path}: not a scene file")
        for lineno, line in enumerate(f, start=2):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "material":
                    materials[int(parts[1])] = [float(v) for v in parts[2:10]]
                elif parts[0] == "voxel":
                    voxels.append([int(v) for v in parts[1:5]])
                else:
                    fields[parts[0]] = parts[1:]
            except (ValueError, IndexError) as exc:
                raise SceneError(f"{path}:{lineno}: {exc}") from None
    try:
        size = np.array([float(v) for v in fields["bounds"]])
        voxel = float(fields["voxel_size"][0])
        start = np.array([float(v) for v in fields["start"]])
        mats = np.array([materials[m] for m in range(len(materials))], dtype=np.float64).reshape(-1, 8)
        grid = np.zeros(tuple(np.round(size / voxel).astype(int)), dtype=np.int32)
        for i, j, k, m in voxels:
            grid[i, j, k] = m + 1
        scene = Scene(
            name=fields["name"][0],
            bounds_max=size,
            voxel_size=voxel,
            grid=grid,
            albedo=mats[:, 0:3].copy(),
            strength=mats[:, 3].copy(),
            spec_dir=mats[:, 4:7].copy(),
            exponent=mats[:, 7].copy(),
            background=np.array([float(v) for v in fields["background"]]),
            start=start[:3],
            start_axis=start[3:6],
            seed=int(fields.get("seed", ["0"])[0]),
        )
    except (KeyError, IndexError, ValueError) as exc:
        raise SceneError(f"{path}: incomplete scene file ({exc})") from None
    scene.validate()
    return scene


def write_rows(path: str, rows: List[Dict], columns: Sequence[str], comment: Optional[str] = None) -> None:
    """CSV with shortest round-trip float formatting; `comment` becomes a leading # line."""
    with open(path, "w", newline="") as f:
        if comment:
            f.write(f"# {comment}\n")
        writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()})


def read_poses(path: str) -> List[Pose]:
    """Poses from any CSV with x, y, z, dx, dy, dz columns; # lines are skipped."""
    with open(path, newline="") as f:
        lines = [line for line in f if not line.startswith("#")]
    poses = []
    for lineno, row in enumerate(csv.DictReader(lines), start=2):
        try:
            position = [float(row[k]) for k in ("x", "y", "z")]
            axis = [float(row[k]) for k in ("dx", "dy", "dz")]
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneError(f"{path}:{lineno}: bad pose row ({exc})") from None
        poses.append(Pose.look_along(position, axis))
    return poses
