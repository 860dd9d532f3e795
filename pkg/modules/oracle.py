"""
Oracle Module
Brute-force reference computations that keep the full observation history.
Used by the test-suite to check the constant-memory statistics; nothing in
the planning path imports this module.
"""

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

# explicit pair sums up to this many samples
PAIRWISE_LIMIT = 512


@dataclass
class FullHistory:
    """Every raw observation of one primitive, in arrival order."""

    dirs: List[np.ndarray] = field(default_factory=list)
    colors: List[np.ndarray] = field(default_factory=list)
    depths: List[float] = field(default_factory=list)

    def add(self, direction, rgb, depth: float) -> None:
        self.dirs.append(np.asarray(direction, dtype=np.float64).reshape(3).copy())
        self.colors.append(np.asarray(rgb, dtype=np.float64).reshape(3).copy())
        self.depths.append(float(depth))

    def __len__(self) -> int:
        return len(self.dirs)


def _basis(q: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(q)))] = 1.0
    e1 = axis - np.dot(axis, q) * q
    e1 = e1 / np.sqrt(np.dot(e1, e1))
    return e1, np.cross(q, e1)


def exact_kappa(dirs, query_dir, tau: float = 0.0, slack: float = 1e-12) -> int:
    q = np.asarray(query_dir, dtype=np.float64)
    e1, e2 = _basis(q)
    us, vs = [], []
    for v in dirs:
        v = np.asarray(v, dtype=np.float64)
        if float(np.dot(v, q)) <= 0.0:
            continue
        us.append(float(np.dot(v, e1)))
        vs.append(float(np.dot(v, e2)))
    if not us:
        return 2
    pad = tau + slack
    inside = min(us) - pad <= 0.0 <= max(us) + pad and min(vs) - pad <= 0.0 <= max(vs) + pad
    return 1 if inside else 2


def exact_bias(history: FullHistory, query_dir) -> Tuple[float, int]:
    """Max raw dot product (clamped to [0, 1]) and the un-inflated kappa."""
    if not history.dirs:
        return 0.0, 2
    q = np.asarray(query_dir, dtype=np.float64)
    best = max(float(np.dot(d, q)) for d in history.dirs)
    return min(1.0, max(0.0, best)), exact_kappa(history.dirs, q)


def pairwise_discrepancy(colors) -> float:
    """
    Mean squared distance over ordered pairs t != t'.

    Short histories sum every pair explicitly. Longer ones use
    sum_{t,t'} |z_t - z_t'|^2 = 2n sum |y_t|^2 - 2 |sum y_t|^2 with y = z - z_0,
    which never forms a mean.
    """
    z = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    n = len(z)
    if n < 2:
        return 0.0
    if n <= PAIRWISE_LIMIT:
        d = z[:, None, :] - z[None, :, :]
        total = float(np.sum(d * d))
    else:
        y = z - z[0]
        s = y.sum(axis=0)
        total = 2.0 * n * float(np.sum(y * y)) - 2.0 * float(np.dot(s, s))
    return total / (n * (n - 1))


def exact_delta(history: FullHistory) -> float:
    if len(history.colors) < 2:
        return 1.0
    raw = 1.0 - pairwise_discrepancy(history.colors)
    return min(1.0, max(0.0, raw))


def batch_cov_trace(colors) -> float:
    """Unbiased covariance trace with a two-pass mean."""
    z = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    n = len(z)
    if n < 2:
        return 0.0
    mu = z.sum(axis=0) / n
    centered = z - mu
    return float(np.sum(centered * centered)) / (n - 1)
