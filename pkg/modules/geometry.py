"""
Camera and grid geometry helpers.

Camera frames follow the pinhole convention x right, y down, z forward.
Poses are camera-to-world (rotation columns are the camera axes in world).
"""

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from ._jit import njit
from .errors import MapError

WORLD_UP = np.array([0.0, 0.0, 1.0])
INF = np.inf


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x: float, fov_y: float) -> "Intrinsics":
        """Pinhole intrinsics from full fields of view in radians."""
        fx = (width / 2.0) / math.tan(fov_x / 2.0)
        fy = (height / 2.0) / math.tan(fov_y / 2.0)
        return cls(fx, fy, width / 2.0, height / 2.0, int(width), int(height))

    @property
    def half_fov(self) -> Tuple[float, float]:
        return math.atan(self.width / 2.0 / self.fx), math.atan(self.height / 2.0 / self.fy)

    def validate(self) -> None:
        values = np.array([self.fx, self.fy, self.cx, self.cy], dtype=np.float64)
        if not np.all(np.isfinite(values)) or self.fx <= 0 or self.fy <= 0:
            raise MapError(f"invalid intrinsics {self}")
        if self.width < 1 or self.height < 1:
            raise MapError(f"invalid raster size {self.width}x{self.height}")


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    position: np.ndarray

    @property
    def axis(self) -> np.ndarray:
        """Optical axis (camera +z) in world coordinates."""
        return self.rotation[:, 2].copy()

    @classmethod
    def look_along(cls, position, axis) -> "Pose":
        position = np.asarray(position, dtype=np.float64).reshape(3)
        return cls(look_rotation(axis), position.copy())

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.position) @ self.rotation

    def is_orthonormal(self, tol: float = 1e-6) -> bool:
        r = self.rotation
        return bool(np.allclose(r.T @ r, np.eye(3), atol=tol) and abs(np.linalg.det(r) - 1.0) < tol)


def normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / n


def look_rotation(axis) -> np.ndarray:
    """Camera-to-world rotation whose forward axis is `axis`, image-down toward -z."""
    forward = normalize(np.asarray(axis, dtype=np.float64).reshape(3))
    up = WORLD_UP if abs(float(forward @ WORLD_UP)) < 0.999 else np.array([0.0, 1.0, 0.0])
    right = normalize(np.cross(forward, up))
    down = np.cross(forward, right)
    return np.stack([right, down, forward], axis=1)


def pixel_rays(pose: Pose, intrinsics: Intrinsics) -> np.ndarray:
    """Unit world ray per pixel center, row-major, shape (H*W, 3)."""
    u = (np.arange(intrinsics.width) + 0.5 - intrinsics.cx) / intrinsics.fx
    v = (np.arange(intrinsics.height) + 0.5 - intrinsics.cy) / intrinsics.fy
    uu, vv = np.meshgrid(u, v)
    cam = np.stack([uu.ravel(), vv.ravel(), np.ones(uu.size)], axis=1)
    return normalize(cam @ pose.rotation.T)


def in_frustum(pose: Pose, intrinsics: Intrinsics, points: np.ndarray) -> np.ndarray:
    cam = pose.world_to_camera(points)
    z = cam[:, 2]
    ok = z > 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        tx, ty = (math.tan(a) for a in intrinsics.half_fov)
        ok &= np.abs(cam[:, 0]) <= tx * z + 1e-12
        ok &= np.abs(cam[:, 1]) <= ty * z + 1e-12
    return ok


def tangent_basis(q) -> Tuple[np.ndarray, np.ndarray]:
    """Pinned orthonormal basis (e1, e2) of the plane orthogonal to q."""
    q = np.asarray(q, dtype=np.float64).reshape(3)
    e1x, e1y, e1z, e2x, e2y, e2z = tangent_basis_kernel(q[0], q[1], q[2])
    return np.array([e1x, e1y, e1z]), np.array([e2x, e2y, e2z])


@njit(cache=True)
def tangent_basis_kernel(q0, q1, q2):
    # coordinate axis least aligned with q, lowest index on ties
    a0 = abs(q0)
    a1 = abs(q1)
    a2 = abs(q2)
    if a0 <= a1 and a0 <= a2:
        x0, x1, x2 = 1.0, 0.0, 0.0
    elif a1 <= a2:
        x0, x1, x2 = 0.0, 1.0, 0.0
    else:
        x0, x1, x2 = 0.0, 0.0, 1.0
    dot = x0 * q0 + x1 * q1 + x2 * q2
    e0 = x0 - dot * q0
    e1 = x1 - dot * q1
    e2 = x2 - dot * q2
    norm = math.sqrt(e0 * e0 + e1 * e1 + e2 * e2)
    e0 /= norm
    e1 /= norm
    e2 /= norm
    # second axis = q x e1
    f0 = q1 * e2 - q2 * e1
    f1 = q2 * e0 - q0 * e2
    f2 = q0 * e1 - q1 * e0
    return e0, e1, e2, f0, f1, f2


# --- Amanatides-Woo traversal over a dense grid --------------------------------

@njit(cache=True)
def ray_setup(gmin, cell, dims, o0, o1, o2, d0, d1, d2):
    """
    Clip a ray against the grid box and initialize traversal.

    Returns (ok, t_enter, i0, i1, i2, s0, s1, s2, tm0, tm1, tm2, td0, td1, td2).
    """
    t_lo = 0.0
    t_hi = INF
    o = (o0, o1, o2)
    d = (d0, d1, d2)
    for a in range(3):
        lo = gmin[a]
        hi = gmin[a] + dims[a] * cell
        if d[a] == 0.0:
            if o[a] < lo or o[a] >= hi:
                return (False, 0.0, 0, 0, 0, 0, 0, 0, INF, INF, INF, INF, INF, INF)
        else:
            ta = (lo - o[a]) / d[a]
            tb = (hi - o[a]) / d[a]
            if ta > tb:
                ta, tb = tb, ta
            if ta > t_lo:
                t_lo = ta
            if tb < t_hi:
                t_hi = tb
    if t_lo > t_hi:
        return (False, 0.0, 0, 0, 0, 0, 0, 0, INF, INF, INF, INF, INF, INF)

    idx = [0, 0, 0]
    step = [0, 0, 0]
    tmax = [INF, INF, INF]
    tdelta = [INF, INF, INF]
    for a in range(3):
        p = o[a] + d[a] * t_lo
        i = int(math.floor((p - gmin[a]) / cell))
        if i < 0:
            i = 0
        if i > dims[a] - 1:
            i = dims[a] - 1
        # entering through the far face of the clamped cell when moving backward
        idx[a] = i
        if d[a] > 0.0:
            step[a] = 1
            tmax[a] = (gmin[a] + (i + 1) * cell - o[a]) / d[a]
            tdelta[a] = cell / d[a]
        elif d[a] < 0.0:
            step[a] = -1
            tmax[a] = (gmin[a] + i * cell - o[a]) / d[a]
            tdelta[a] = -cell / d[a]
    return (True, t_lo, idx[0], idx[1], idx[2], step[0], step[1], step[2],
            tmax[0], tmax[1], tmax[2], tdelta[0], tdelta[1], tdelta[2])


@njit(cache=True)
def ray_step(i0, i1, i2, s0, s1, s2, tm0, tm1, tm2, td0, td1, td2):
    """Advance to the next cell; returns (t_enter_next, i0, i1, i2, tm0, tm1, tm2)."""
    if tm0 <= tm1 and tm0 <= tm2:
        t = tm0
        i0 += s0
        tm0 += td0
    elif tm1 <= tm2:
        t = tm1
        i1 += s1
        tm1 += td1
    else:
        t = tm2
        i2 += s2
        tm2 += td2
    return t, i0, i1, i2, tm0, tm1, tm2


@njit(cache=True)
def traverse_cells(gmin, cell, dims, o0, o1, o2, d0, d1, d2, t_limit, out):
    """
    Write the flat indices of every cell a ray segment [0, t_limit) crosses.

    Returns the number of cells written; used by tests and small tools.
    """
    state = ray_setup(gmin, cell, dims, o0, o1, o2, d0, d1, d2)
    if not state[0]:
        return 0
    t = state[1]
    i0, i1, i2 = state[2], state[3], state[4]
    s0, s1, s2 = state[5], state[6], state[7]
    tm0, tm1, tm2 = state[8], state[9], state[10]
    td0, td1, td2 = state[11], state[12], state[13]
    count = 0
    while t < t_limit and count < out.shape[0]:
        if i0 < 0 or i1 < 0 or i2 < 0 or i0 >= dims[0] or i1 >= dims[1] or i2 >= dims[2]:
            break
        out[count] = (i0 * dims[1] + i1) * dims[2] + i2
        count += 1
        t, i0, i1, i2, tm0, tm1, tm2 = ray_step(i0, i1, i2, s0, s1, s2, tm0, tm1, tm2, td0, td1, td2)
    return count
