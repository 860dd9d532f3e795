"""
Planner Module
Next-best-view selection: candidate sampling, utility scoring
U = lambda1 * U_G + U_R - lambda2 * U_path, and panoramic optical-axis
selection over precomputed FoV bin sets.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, TextIO, Tuple

import numpy as np

from .errors import LatticeError, PlannerStallError, SaturatedPoseError
from .fibsphere import Lattice, nearest_bins
from .geometry import Intrinsics, Pose
from .renderability import renderability_table
from .world_map import FREE, Probe, View, WorldMap, distance_field, path_cost, probe

logger = logging.getLogger(__name__)

MODES = ("pinhole", "panoramic", "random")
# rejection-sampling attempts per requested candidate
SAMPLE_ATTEMPTS = 50


@dataclass
class PlannerConfig:
    lambda1: float = 1.0
    lambda2: float = 0.1
    candidate_count: int = 16
    candidate_radius: float = 1.5
    mode: str = "pinhole"
    # circumscribed cone of a 60 x 60 degree frustum
    half_angle: float = math.radians(39.2)
    fov: float = math.radians(60.0)
    max_range: float = 4.0
    directions_per_position: int = 8
    probe_resolution: int = 128
    rng_seed: int = 0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"planner mode must be one of {MODES}, got {self.mode!r}")
        if self.candidate_count < 1 or self.directions_per_position < 1:
            raise ValueError("candidate_count and directions_per_position must be >= 1")
        for name in ("lambda1", "lambda2"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {value!r}")
        if not (0.0 < self.fov < math.pi) or self.max_range <= 0 or self.candidate_radius <= 0:
            raise ValueError("fov, max_range and candidate_radius must be positive")

    def probe_intrinsics(self) -> Intrinsics:
        return Intrinsics.from_fov(self.probe_resolution, self.probe_resolution, self.fov, self.fov)


@dataclass
class CandidateScore:
    position: np.ndarray
    direction: Optional[np.ndarray]
    u_g: int
    u_r: float
    u_path: float
    u_view: float
    n_visible: int = 0
    probe: Optional[Probe] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> Dict:
        return {
            "position": [round(float(v), 6) for v in self.position],
            "direction": None if self.direction is None else [round(float(v), 6) for v in self.direction],
            "u_g": int(self.u_g),
            "u_r": float(self.u_r),
            "u_path": float(self.u_path),
            "u_view": float(self.u_view),
            "n_visible": int(self.n_visible),
        }


@dataclass
class Decision:
    """Chosen pose of one planning step plus everything that was scored."""

    position: np.ndarray
    direction: np.ndarray
    score: CandidateScore
    candidates: List[CandidateScore]
    bin_scores: Optional[np.ndarray] = field(default=None, repr=False)
    saturated: bool = False

    def pose(self) -> Pose:
        return Pose.look_along(self.position, self.direction)


def view_utility(lambda1: float, u_g: float, u_r: float, lambda2: float, u_path: float) -> float:
    return lambda1 * u_g + u_r - lambda2 * u_path


def renderability_deficit(r_values) -> float:
    """U_R = sum(1 - R) over visible voxels."""
    r = np.asarray(r_values, dtype=np.float64)
    return float(np.sum(1.0 - r)) if r.size else 0.0


def uniform_directions(rng: np.random.Generator, count: int) -> np.ndarray:
    v = rng.normal(size=(count, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _visible_r(world: WorldMap, p: Probe) -> np.ndarray:
    if len(p.voxel_keys) == 0:
        return np.empty(0, dtype=np.float64)
    return renderability_table(world, p.voxel_keys, p.voxel_dirs, p.voxel_depths)[:, 6]


def score_candidate(world: WorldMap, position, cfg: PlannerConfig, origin_field: np.ndarray,
                    direction=None, pano_lattice: Optional[Lattice] = None) -> Optional[CandidateScore]:
    """
    Score one candidate position (and optical axis in pinhole mode).

    Returns:
        CandidateScore, or None when the position is not free or not reachable
        from the agent (the candidate is discarded).
    """
    position = np.asarray(position, dtype=np.float64).reshape(3)
    if world.state_at(position) != FREE:
        return None
    u_path = path_cost(world, None, position, field=origin_field)
    if u_path is None:
        return None
    if direction is None:
        view = View.panoramic()
    else:
        view = View.pinhole(direction, cfg.probe_intrinsics())
    p = probe(world, position, view, cfg.max_range, pano_lattice)
    r = _visible_r(world, p)
    u_g = int(len(p.unknown_cells))
    u_r = renderability_deficit(r)
    return CandidateScore(
        position=position,
        direction=None if direction is None else view.axis,
        u_g=u_g,
        u_r=u_r,
        u_path=u_path,
        u_view=view_utility(cfg.lambda1, u_g, u_r, cfg.lambda2, u_path),
        n_visible=int(len(r)),
        probe=p,
    )


def aggregate_bin_scores(lattice: Lattice, base: np.ndarray) -> np.ndarray:
    """S(k) = sum of s(j) over j in N(k)."""
    if lattice.fov_sets is None:
        raise LatticeError("panoramic selection needs a lattice with FoV sets")
    return np.array([base[idx].sum() for idx in lattice.fov_sets], dtype=np.float64)


def panoramic_direction(world: WorldMap, pano_lattice: Lattice, position, cfg: PlannerConfig,
                        probe_result: Optional[Probe] = None) -> Tuple[np.ndarray, Dict]:
    """
    Pick the optical axis whose FoV set gathers the most utility.

    Returns:
        (axis q_k*, table with base scores "s", aggregated "S" and "best")
    """
    origin = np.asarray(position, dtype=np.float64).reshape(3)
    if probe_result is None:
        probe_result = probe(world, origin, View.panoramic(), cfg.max_range, pano_lattice)
    g_points = world.cell_centers(probe_result.unknown_cells)
    v_points = world.voxel_centers(probe_result.voxel_keys)
    if len(g_points) + len(v_points) == 0:
        raise SaturatedPoseError(f"nothing left to see from {np.round(origin, 3).tolist()}")

    n = pano_lattice.n_bins
    base = np.zeros(n, dtype=np.float64)
    if len(g_points):
        g_bins = nearest_bins(pano_lattice, _unit_rows(g_points - origin))
        base += cfg.lambda1 * np.bincount(g_bins, minlength=n)
    if len(v_points):
        v_bins = nearest_bins(pano_lattice, _unit_rows(v_points - origin))
        deficit = 1.0 - _visible_r(world, probe_result)
        base += np.bincount(v_bins, weights=deficit, minlength=n)
    total = aggregate_bin_scores(pano_lattice, base)
    best = int(np.argmax(total))
    return pano_lattice.centers[best].copy(), {"s": base, "S": total, "best": best}


def _unit_rows(v: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(v / np.linalg.norm(v, axis=1, keepdims=True))


def sample_candidates(world: WorldMap, current, cfg: PlannerConfig, rng: np.random.Generator,
                      origin_field: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Free cell centers within candidate_radius of the agent, by rejection sampling.

    Falls back to reachable free cells anywhere in the map when no sampled
    candidate is reachable.
    """
    free = world.free_cells()
    if len(free) == 0:
        raise PlannerStallError("the map has no free cells")
    current = np.asarray(current, dtype=np.float64).reshape(3)
    if origin_field is None:
        origin_field = distance_field(world, current)

    reachable_count = int(np.count_nonzero(origin_field >= 0))
    picked: List[int] = []
    seen = set()
    radius = cfg.candidate_radius
    for _ in range(cfg.candidate_count * SAMPLE_ATTEMPTS):
        if len(picked) == cfg.candidate_count:
            break
        offset = rng.uniform(-radius, radius, size=3)
        if float(offset @ offset) > radius * radius:
            continue
        point = current + offset
        if not world.in_bounds(point)[0]:
            continue
        cell = int(world.flat_cells(point)[0])
        if world.occupancy[cell] != FREE or origin_field[cell] < 0:
            continue
        if cell not in seen:
            seen.add(cell)
            picked.append(cell)
        elif len(seen) == reachable_count:
            break
    if not picked:
        reachable = np.flatnonzero(origin_field >= 0)
        take = min(cfg.candidate_count, len(reachable))
        picked = sorted(rng.choice(reachable, size=take, replace=False).tolist())
        logger.info("no reachable candidate within %.2f m, using %d global free cells", radius, take)
    return world.cell_centers(picked)


def _lexsorted(points: np.ndarray) -> np.ndarray:
    order = np.lexsort((points[:, 2], points[:, 1], points[:, 0]))
    return points[order]


def _argmax(scores: List[CandidateScore]) -> int:
    best = 0
    for i, s in enumerate(scores):
        if s.u_view > scores[best].u_view:
            best = i
    return best


def select_nbv(world: WorldMap, pano_lattice: Optional[Lattice], position, cfg: PlannerConfig,
               rng: np.random.Generator, step: int = 0, log: Optional[TextIO] = None) -> Decision:
    """
    Sample, score and pick the next view.

    pinhole: each candidate position gets directions_per_position random axes
    scored with frustum visibility. panoramic: positions are scored with
    panoramic visibility and the winner's axis comes from panoramic_direction.
    random: a reachable candidate and an axis are drawn from rng.
    """
    current = np.asarray(position, dtype=np.float64).reshape(3)
    origin_field = distance_field(world, current)
    candidates = _lexsorted(sample_candidates(world, current, cfg, rng, origin_field))

    scores: List[CandidateScore] = []
    bin_table = None
    saturated = False
    if cfg.mode == "pinhole":
        for cand in candidates:
            for axis in uniform_directions(rng, cfg.directions_per_position):
                s = score_candidate(world, cand, cfg, origin_field, direction=axis)
                if s is not None:
                    scores.append(s)
    elif cfg.mode == "panoramic":
        for cand in candidates:
            s = score_candidate(world, cand, cfg, origin_field, pano_lattice=pano_lattice)
            if s is not None:
                scores.append(s)
    else:
        for cand in candidates:
            u_path = path_cost(world, None, cand, field=origin_field)
            if u_path is not None:
                scores.append(CandidateScore(cand, None, 0, 0.0, u_path,
                                             view_utility(cfg.lambda1, 0, 0.0, cfg.lambda2, u_path)))

    if not scores:
        raise PlannerStallError(f"step {step}: none of {len(candidates)} candidates is reachable")

    if cfg.mode == "random":
        chosen = scores[int(rng.integers(len(scores)))]
        direction = uniform_directions(rng, 1)[0]
    else:
        chosen = scores[_argmax(scores)]
        if cfg.mode == "pinhole":
            direction = chosen.direction
        else:
            try:
                direction, bin_table = panoramic_direction(world, pano_lattice, chosen.position, cfg, chosen.probe)
            except SaturatedPoseError as exc:
                logger.warning("step %d: %s", step, exc)
                direction = pano_lattice.centers[0].copy()
                saturated = True
    chosen.direction = np.asarray(direction, dtype=np.float64)

    decision = Decision(chosen.position, chosen.direction, chosen, scores,
                        None if bin_table is None else bin_table["S"], saturated)
    logger.info("step %d: %s -> pos=%s u_g=%d u_r=%.3f u_path=%.2f u_view=%.3f (%d scored)",
                step, cfg.mode, np.round(chosen.position, 3).tolist(), chosen.u_g, chosen.u_r,
                chosen.u_path, chosen.u_view, len(scores))
    if log is not None:
        log.write(json.dumps(step_record(step, cfg.mode, decision)) + "\n")
    return decision


def step_record(step: int, mode: str, decision: Decision) -> Dict:
    return {
        "step": step,
        "mode": mode,
        "chosen": decision.score.to_dict(),
        "saturated": decision.saturated,
        "candidates": [c.to_dict() for c in decision.candidates],
    }


def panoramic_mean_r(world: WorldMap, pano_lattice: Lattice, position, max_range: Optional[float] = None) -> float:
    """Mean R over panoramically visible voxels; 0 when nothing is visible."""
    p = probe(world, position, View.panoramic(), max_range, pano_lattice)
    r = _visible_r(world, p)
    return float(r.mean()) if len(r) else 0.0


def score_pose(world: WorldMap, position, direction, cfg: PlannerConfig,
               origin_field: Optional[np.ndarray] = None, pano_lattice: Optional[Lattice] = None) -> Dict:
    """
    Offline scores of one fixed pose.

    U_G, U_R and mean R use the pinhole probe along `direction`; U_path and
    U_view are filled only when origin_field reaches the pose.
    """
    position = np.asarray(position, dtype=np.float64).reshape(3)
    row = {"status": "blocked", "u_g": None, "u_r": None, "u_path": None, "u_view": None,
           "mean_r": None, "pano_mean_r": None, "n_visible": 0}
    if world.state_at(position) != FREE:
        return row
    p = probe(world, position, View.pinhole(direction, cfg.probe_intrinsics()), cfg.max_range)
    r = _visible_r(world, p)
    row.update({
        "status": "unreachable",
        "u_g": int(len(p.unknown_cells)),
        "u_r": renderability_deficit(r),
        "mean_r": float(r.mean()) if len(r) else 0.0,
        "n_visible": int(len(r)),
    })
    if origin_field is not None:
        u_path = path_cost(world, None, position, field=origin_field)
        if u_path is not None:
            row["status"] = "ok"
            row["u_path"] = u_path
            row["u_view"] = view_utility(cfg.lambda1, row["u_g"], row["u_r"], cfg.lambda2, u_path)
    if pano_lattice is not None:
        row["pano_mean_r"] = panoramic_mean_r(world, pano_lattice, position, cfg.max_range)
    return row
