"""
Fibonacci Sphere Module
Deterministic Fibonacci-lattice binning of unit directions, used by the
per-voxel visited-bin masks and by panoramic view-direction selection.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.spatial import ConvexHull

from ._jit import njit
from .errors import LatticeError

logger = logging.getLogger(__name__)

GOLDEN_RATIO = (1.0 + math.sqrt(5.0)) / 2.0
UNIT_TOLERANCE = 1e-6
# directions used to measure the covering radius
RADIUS_PROBES = 10_000


@dataclass(frozen=True)
class Lattice:
    """Bin centers q_k on the unit sphere plus optional FoV neighbor sets N(k)."""

    n_bins: int
    centers: np.ndarray
    bin_radius: float
    fov_half_angle: Optional[float] = None
    fov_sets: Optional[List[np.ndarray]] = field(default=None, repr=False)

    @property
    def n_words(self) -> int:
        """64-bit words per visited-bin mask."""
        return (self.n_bins + 63) // 64

    @property
    def compact_mask(self) -> bool:
        return self.n_bins <= 64

    def info(self) -> Dict:
        info = {
            "n_bins": self.n_bins,
            "bin_radius_deg": round(math.degrees(self.bin_radius), 4),
            "mask_words": self.n_words,
            "compact_mask": self.compact_mask,
        }
        if self.fov_sets is not None:
            sizes = np.array([len(s) for s in self.fov_sets])
            info.update({
                "fov_half_angle_deg": round(math.degrees(self.fov_half_angle), 4),
                "fov_set_min": int(sizes.min()),
                "fov_set_mean": round(float(sizes.mean()), 3),
                "fov_set_max": int(sizes.max()),
            })
        return info


def bins_for_resolution(theta_res: float) -> int:
    """N = ceil(4*pi / A) with A the area of a spherical cap of angle theta_res/2."""
    if not (0.0 < theta_res < math.pi):
        raise LatticeError(f"theta_res must lie in (0, pi), got {theta_res!r}")
    cap_area = 2.0 * math.pi * (1.0 - math.cos(theta_res / 2.0))
    return int(math.ceil(4.0 * math.pi / cap_area))


def fibonacci_centers(n_bins: int) -> np.ndarray:
    # index j = k - 1 of the 1..N loop keeps every z inside (-1, 1)
    j = np.arange(n_bins, dtype=np.float64)
    z = 1.0 - 2.0 * (j + 0.5) / n_bins
    r = np.sqrt(1.0 - z * z)
    phi = 2.0 * math.pi * j / GOLDEN_RATIO
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _probe_directions(count: int) -> np.ndarray:
    # golden-spiral points with a half-step phase offset, independent of the lattice
    j = np.arange(count, dtype=np.float64)
    z = 1.0 - (2.0 * j + 1.0) / count
    r = np.sqrt(1.0 - z * z)
    phi = math.pi * (3.0 - math.sqrt(5.0)) * (j + 0.5)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _measure_bin_radius(centers: np.ndarray) -> float:
    probes = _probe_directions(RADIUS_PROBES)
    best = np.max(probes @ centers.T, axis=1)
    sampled = float(np.max(np.arccos(np.clip(best, -1.0, 1.0))))

    # Voronoi vertices on the sphere are the outward facet normals of the hull
    hull = ConvexHull(centers)
    normals = hull.equations[:, :3]
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    corner = centers[hull.simplices[:, 0]]
    facet = np.einsum("ij,ij->i", normals, corner)
    exact = float(np.max(np.arccos(np.clip(facet, -1.0, 1.0))))
    return max(sampled, exact)


def build_lattice(n_bins: Optional[int] = None, theta_res: Optional[float] = None) -> Lattice:
    """
    Build a Fibonacci lattice from either a bin count or a target central angle.

    Args:
        n_bins: number of bins N (>= 4).
        theta_res: target central angle in radians; N is derived from the cap area.

    Returns:
        Lattice with unit centers and its measured covering radius.
    """
    if (n_bins is None) == (theta_res is None):
        raise LatticeError("give exactly one of n_bins or theta_res")
    if theta_res is not None:
        n_bins = bins_for_resolution(theta_res)
    if isinstance(n_bins, bool) or int(n_bins) != n_bins or n_bins < 4:
        raise LatticeError(f"a lattice needs at least 4 bins, got {n_bins!r}")
    n_bins = int(n_bins)

    centers = fibonacci_centers(n_bins)
    centers.setflags(write=False)
    radius = _measure_bin_radius(centers)
    logger.debug("lattice N=%d bin_radius=%.3f deg", n_bins, math.degrees(radius))
    return Lattice(n_bins=n_bins, centers=centers, bin_radius=radius)


@njit(cache=True)
def nearest_bin_kernel(centers, d0, d1, d2):
    best = 0
    best_dot = -2.0
    for k in range(centers.shape[0]):
        dot = centers[k, 0] * d0 + centers[k, 1] * d1 + centers[k, 2] * d2
        if dot > best_dot:
            best_dot = dot
            best = k
    return best


@njit(cache=True)
def nearest_bins_kernel(centers, dirs, out):
    for i in range(dirs.shape[0]):
        out[i] = nearest_bin_kernel(centers, dirs[i, 0], dirs[i, 1], dirs[i, 2])


def _check_unit(dirs: np.ndarray) -> None:
    norms = np.linalg.norm(dirs, axis=-1)
    if not np.all(np.isfinite(norms)) or np.any(np.abs(norms - 1.0) > UNIT_TOLERANCE):
        raise LatticeError("direction must be unit-norm within 1e-6")


def nearest_bin(lattice: Lattice, direction) -> int:
    """argmax_k <q_k, dir>, lowest index on ties."""
    d = np.asarray(direction, dtype=np.float64).reshape(3)
    _check_unit(d)
    return int(nearest_bin_kernel(lattice.centers, d[0], d[1], d[2]))


def nearest_bins(lattice: Lattice, directions) -> np.ndarray:
    dirs = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
    if len(dirs):
        _check_unit(dirs)
    out = np.empty(len(dirs), dtype=np.int64)
    nearest_bins_kernel(lattice.centers, dirs, out)
    return out


def build_fov_sets(lattice: Lattice, half_angle: float) -> Lattice:
    """
    Precompute N(k) = {j : <q_j, q_k> >= cos(half_angle)} for every bin.

    Returns a new Lattice carrying the sets; the input lattice is unchanged.
    """
    if not (0.0 < half_angle <= math.pi / 2.0):
        raise LatticeError(f"half_angle must lie in (0, pi/2], got {half_angle!r}")
    c = lattice.centers
    dots = c @ c.T
    # exact symmetry so j in N(k) <=> k in N(j)
    upper = np.triu(dots)
    dots = upper + np.triu(upper, 1).T
    limit = math.cos(half_angle)
    member = dots >= limit
    np.fill_diagonal(member, True)
    sets = [np.flatnonzero(row) for row in member]
    for s in sets:
        s.setflags(write=False)
    return Lattice(
        n_bins=lattice.n_bins,
        centers=lattice.centers,
        bin_radius=lattice.bin_radius,
        fov_half_angle=float(half_angle),
        fov_sets=sets,
    )


def angle_to_nearest(lattice: Lattice, directions) -> np.ndarray:
    """Angle in radians from each direction to its nearest bin center."""
    dirs = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    idx = nearest_bins(lattice, dirs)
    dots = np.einsum("ij,ij->i", dirs, lattice.centers[idx])
    return np.arccos(np.clip(dots, -1.0, 1.0))
