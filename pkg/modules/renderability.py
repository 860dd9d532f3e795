"""
Renderability Module
Closed-form renderability R = b * eps * gamma of a primitive seen from a query
viewpoint, computed only from its constant-size VoxelStats.
"""

import math
from dataclasses import dataclass
from typing import Dict

import numpy as np

from ._jit import njit
from .errors import LatticeError, StatsError
from .fibsphere import Lattice
from .geometry import tangent_basis_kernel
from .voxel_stats import VoxelStats, delta_kernel

# numerical slack on the tangent-plane box so an exact repeat projects inside
BOX_SLACK = 1e-12
# columns of the kernel output
COLUMNS = ("cos_theta", "kappa", "b", "delta", "epsilon", "gamma", "r")


@dataclass(frozen=True)
class BiasResult:
    cos_theta: float
    kappa: int
    b: float


@dataclass(frozen=True)
class RenderabilityScore:
    b: float
    epsilon: float
    gamma: float
    r: float
    cos_theta: float = 0.0
    kappa: int = 2
    delta: float = 1.0


@njit(cache=True)
def max_dot_masked(points, use, q0, q1, q2):
    best = -2.0
    for k in range(points.shape[0]):
        if use[k]:
            dot = points[k, 0] * q0 + points[k, 1] * q1 + points[k, 2] * q2
            if dot > best:
                best = dot
    if best < 0.0:
        return 0.0
    if best > 1.0:
        return 1.0
    return best


@njit(cache=True)
def kappa_masked(points, use, q0, q1, q2, tau):
    e10, e11, e12, e20, e21, e22 = tangent_basis_kernel(q0, q1, q2)
    umin = np.inf
    umax = -np.inf
    vmin = np.inf
    vmax = -np.inf
    count = 0
    for k in range(points.shape[0]):
        if not use[k]:
            continue
        p0 = points[k, 0]
        p1 = points[k, 1]
        p2 = points[k, 2]
        if p0 * q0 + p1 * q1 + p2 * q2 <= 0.0:
            continue
        u = p0 * e10 + p1 * e11 + p2 * e12
        v = p0 * e20 + p1 * e21 + p2 * e22
        if u < umin:
            umin = u
        if u > umax:
            umax = u
        if v < vmin:
            vmin = v
        if v > vmax:
            vmax = v
        count += 1
    if count == 0:
        return 2
    pad = tau + BOX_SLACK
    if umin - pad <= 0.0 and umax + pad >= 0.0 and vmin - pad <= 0.0 and vmax + pad >= 0.0:
        return 1
    return 2


@njit(cache=True)
def epsilon_kernel(delta, kappa, b):
    return delta ** (kappa * (1.0 - b))


@njit(cache=True)
def gamma_kernel(rho_max, query_depth, delta, b):
    if rho_max <= 0.0:
        return 0.0
    rho_s = 1.0 / query_depth
    ratio = rho_max / rho_s
    if ratio > 1.0:
        ratio = 1.0
    return ratio ** (1.0 - delta * b)


@njit(cache=True)
def fill_visited(masks, row, n_bins, use):
    for k in range(n_bins):
        use[k] = ((masks[row, k >> 6] >> np.uint64(k & 63)) & np.uint64(1)) != 0


@njit(cache=True)
def renderability_kernel(masks, counts, m2s, rho, rows, centers, qdirs, qdepths, tau, out):
    n_bins = centers.shape[0]
    use = np.zeros(n_bins, dtype=np.bool_)
    for i in range(rows.shape[0]):
        row = rows[i]
        if row < 0:
            out[i, 0] = 0.0
            out[i, 1] = 2.0
            out[i, 2] = 0.0
            out[i, 3] = 1.0
            out[i, 4] = 1.0
            out[i, 5] = 0.0
            out[i, 6] = 0.0
            continue
        fill_visited(masks, row, n_bins, use)
        q0 = qdirs[i, 0]
        q1 = qdirs[i, 1]
        q2 = qdirs[i, 2]
        cos_theta = max_dot_masked(centers, use, q0, q1, q2)
        kappa = float(kappa_masked(centers, use, q0, q1, q2, tau))
        b = cos_theta ** kappa
        delta = delta_kernel(counts[row], m2s[row])
        eps = epsilon_kernel(delta, kappa, b)
        gamma = gamma_kernel(rho[row], qdepths[i], delta, b)
        out[i, 0] = cos_theta
        out[i, 1] = kappa
        out[i, 2] = b
        out[i, 3] = delta
        out[i, 4] = eps
        out[i, 5] = gamma
        out[i, 6] = b * eps * gamma


def extrapolation_margin(lattice: Lattice) -> float:
    """Box inflation tau = sin(bin_radius / 2)."""
    return math.sin(lattice.bin_radius / 2.0)


def _unit(direction, what: str = "query direction") -> np.ndarray:
    d = np.asarray(direction, dtype=np.float64).reshape(3)
    norm = float(np.linalg.norm(d))
    if not math.isfinite(norm) or abs(norm - 1.0) > 1e-6:
        raise LatticeError(f"{what} must be unit-norm, got norm {norm}")
    return d


def _visited_use(stats: VoxelStats, lattice: Lattice) -> np.ndarray:
    if stats.n_bins != lattice.n_bins:
        raise LatticeError(f"stats over {stats.n_bins} bins queried with a {lattice.n_bins}-bin lattice")
    use = np.zeros(lattice.n_bins, dtype=np.bool_)
    fill_visited(stats.arrays[0], 0, lattice.n_bins, use)
    return use


def classify_extrapolation(visited_dirs, query_dir, tau: float = 0.0) -> int:
    """
    Tangent-plane bounding-box test.

    Returns 1 when the query projects inside the (tau-inflated) box of the
    front-facing visited directions, else 2.
    """
    q = _unit(query_dir)
    points = np.ascontiguousarray(visited_dirs, dtype=np.float64).reshape(-1, 3)
    use = np.ones(len(points), dtype=np.bool_)
    return int(kappa_masked(points, use, q[0], q[1], q[2], float(tau)))


def bias(stats: VoxelStats, lattice: Lattice, query_dir) -> BiasResult:
    q = _unit(query_dir)
    use = _visited_use(stats, lattice)
    cos_theta = float(max_dot_masked(lattice.centers, use, q[0], q[1], q[2]))
    kappa = int(kappa_masked(lattice.centers, use, q[0], q[1], q[2], extrapolation_margin(lattice)))
    return BiasResult(cos_theta=cos_theta, kappa=kappa, b=cos_theta ** float(kappa))


def epsilon(delta: float, kappa: int, b: float) -> float:
    """eps = delta ** (kappa * (1 - b)), with 0 ** 0 = 1."""
    return float(epsilon_kernel(float(delta), float(kappa), float(b)))


def resolution_gain(stats: VoxelStats, query_depth: float, delta: float, b: float) -> float:
    """gamma = min(1, rho_max / rho_s) ** (1 - delta * b); 0 for unobserved stats."""
    if not (math.isfinite(query_depth) and query_depth > 0.0):
        raise StatsError(f"query depth must be positive and finite, got {query_depth!r}")
    return float(gamma_kernel(stats.rho_max, float(query_depth), float(delta), float(b)))


def renderability(stats: VoxelStats, lattice: Lattice, query_dir, query_depth: float) -> RenderabilityScore:
    q = _unit(query_dir)
    if not (math.isfinite(query_depth) and query_depth > 0.0):
        raise StatsError(f"query depth must be positive and finite, got {query_depth!r}")
    if stats.n_bins != lattice.n_bins:
        raise LatticeError(f"stats over {stats.n_bins} bins queried with a {lattice.n_bins}-bin lattice")
    masks, counts, _, m2s, rho = stats.arrays
    out = np.empty((1, len(COLUMNS)), dtype=np.float64)
    renderability_kernel(masks, counts, m2s, rho, np.zeros(1, dtype=np.int64), lattice.centers,
                         q.reshape(1, 3), np.array([query_depth], dtype=np.float64),
                         extrapolation_margin(lattice), out)
    return _score(out[0])


def _score(row: np.ndarray) -> RenderabilityScore:
    return RenderabilityScore(b=float(row[2]), epsilon=float(row[4]), gamma=float(row[5]), r=float(row[6]),
                              cos_theta=float(row[0]), kappa=int(row[1]), delta=float(row[3]))


def query_geometry(centers: np.ndarray, position) -> Dict[str, np.ndarray]:
    """Unit directions and ranges from a camera position to voxel centers."""
    offsets = np.asarray(centers, dtype=np.float64).reshape(-1, 3) - np.asarray(position, dtype=np.float64)
    depths = np.sqrt(np.einsum("ij,ij->i", offsets, offsets))
    safe = np.where(depths > 0.0, depths, 1.0)
    return {"dirs": np.ascontiguousarray(offsets / safe[:, None]), "depths": depths}


def renderability_table(world, keys, dirs, depths) -> np.ndarray:
    """
    Score many (voxel, direction, depth) queries at once.

    Returns:
        (m, 7) array with the columns in COLUMNS. Unknown keys and zero-range
        queries score R = 0.
    """
    keys = np.asarray(keys, dtype=np.int64).ravel()
    out = np.empty((len(keys), len(COLUMNS)), dtype=np.float64)
    if len(keys) == 0:
        return out
    rows = world.stats.rows_for(keys, create=False)
    depths = np.asarray(depths, dtype=np.float64).ravel()
    rows = np.where(depths > 0.0, rows, -1)
    masks, counts, _, m2s, rho = world.stats.arrays
    renderability_kernel(masks, counts, m2s, rho, rows, world.lattice.centers,
                         np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3),
                         np.ascontiguousarray(depths), extrapolation_margin(world.lattice), out)
    return out


def batch_renderability(world, voxel_ids, query_position) -> np.ndarray:
    """R per voxel seen from a camera position; missing voxels score 0."""
    keys = np.asarray(voxel_ids, dtype=np.int64).ravel()
    if len(keys) == 0:
        return np.empty(0, dtype=np.float64)
    geo = query_geometry(world.voxel_centers(keys), query_position)
    return renderability_table(world, keys, geo["dirs"], geo["depths"])[:, 6].copy()
