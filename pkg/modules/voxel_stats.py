"""
Voxel Statistics Module
Constant-size online state per surface primitive: visited-direction bins,
Welford RGB moments and the best observed resolution.
"""

import logging
import math
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from ._jit import njit
from .errors import StatsError
from .fibsphere import Lattice, nearest_bins_kernel

logger = logging.getLogger(__name__)

# delta = 1 - ALPHA * sqrt(tr(M) / (n - 1))
ALPHA = math.sqrt(2.0 / 1.5)
# m2 storage order: xx yy zz xy xz yz
M2_FIELDS = ("xx", "yy", "zz", "xy", "xz", "yz")


def record_dtype(n_words: int) -> np.dtype:
    """Little-endian per-voxel record used by snapshots."""
    return np.dtype([
        ("key", "<i8"),
        ("mask", "<u8", (n_words,)),
        ("n", "<i8"),
        ("mean", "<f8", (3,)),
        ("m2", "<f8", (6,)),
        ("rho_max", "<f8"),
    ])


# --- kernels shared by single values and tables -----------------------------

@njit(cache=True, nogil=True)
def apply_sample(masks, counts, means, m2s, rho, row, bin_idx, r, g, b, depth):
    n = counts[row] + 1
    counts[row] = n
    d0 = r - means[row, 0]
    d1 = g - means[row, 1]
    d2 = b - means[row, 2]
    means[row, 0] += d0 / n
    means[row, 1] += d1 / n
    means[row, 2] += d2 / n
    # (z - mu_new) on the left, (z - mu_old) on the right
    e0 = r - means[row, 0]
    e1 = g - means[row, 1]
    e2 = b - means[row, 2]
    m2s[row, 0] += e0 * d0
    m2s[row, 1] += e1 * d1
    m2s[row, 2] += e2 * d2
    m2s[row, 3] += e0 * d1
    m2s[row, 4] += e0 * d2
    m2s[row, 5] += e1 * d2
    inv = 1.0 / depth
    if inv > rho[row]:
        rho[row] = inv
    word = bin_idx >> 6
    bit = bin_idx & 63
    masks[row, word] |= np.uint64(1) << np.uint64(bit)


@njit(cache=True, nogil=True)
def ingest_kernel(masks, counts, means, m2s, rho, rows, bins, rgbs, depths):
    for i in range(rows.shape[0]):
        apply_sample(masks, counts, means, m2s, rho, rows[i], bins[i],
                     rgbs[i, 0], rgbs[i, 1], rgbs[i, 2], depths[i])


@njit(cache=True)
def delta_kernel(n, m2):
    if n < 2:
        return 1.0
    trace = m2[0] + m2[1] + m2[2]
    value = 1.0 - ALPHA * math.sqrt(trace / (n - 1))
    if value < 0.0:
        return 0.0
    if value > 1.0:
        return 1.0
    return value


@njit(cache=True)
def merge_rows(masks, counts, means, m2s, rho, dst,
               src_masks, src_counts, src_means, src_m2s, src_rho, src):
    nb = src_counts[src]
    if nb == 0:
        return
    na = counts[dst]
    for w in range(masks.shape[1]):
        masks[dst, w] |= src_masks[src, w]
    if src_rho[src] > rho[dst]:
        rho[dst] = src_rho[src]
    if na == 0:
        counts[dst] = nb
        for c in range(3):
            means[dst, c] = src_means[src, c]
        for c in range(6):
            m2s[dst, c] = src_m2s[src, c]
        return
    n = na + nb
    d0 = src_means[src, 0] - means[dst, 0]
    d1 = src_means[src, 1] - means[dst, 1]
    d2 = src_means[src, 2] - means[dst, 2]
    w_ab = na * nb / n
    m2s[dst, 0] += src_m2s[src, 0] + d0 * d0 * w_ab
    m2s[dst, 1] += src_m2s[src, 1] + d1 * d1 * w_ab
    m2s[dst, 2] += src_m2s[src, 2] + d2 * d2 * w_ab
    m2s[dst, 3] += src_m2s[src, 3] + d0 * d1 * w_ab
    m2s[dst, 4] += src_m2s[src, 4] + d0 * d2 * w_ab
    m2s[dst, 5] += src_m2s[src, 5] + d1 * d2 * w_ab
    frac = nb / n
    means[dst, 0] += d0 * frac
    means[dst, 1] += d1 * frac
    means[dst, 2] += d2 * frac
    counts[dst] = n


@njit(cache=True)
def merge_table_kernel(masks, counts, means, m2s, rho, dst_rows,
                       src_masks, src_counts, src_means, src_m2s, src_rho, src_rows):
    for i in range(dst_rows.shape[0]):
        merge_rows(masks, counts, means, m2s, rho, dst_rows[i],
                   src_masks, src_counts, src_means, src_m2s, src_rho, src_rows[i])


def _popcount(words: np.ndarray) -> int:
    return sum(bin(int(w)).count("1") for w in words)


def _bits(words: np.ndarray, n_bins: int) -> np.ndarray:
    raw = np.ascontiguousarray(words, dtype="<u8").view(np.uint8)
    idx = np.flatnonzero(np.unpackbits(raw, bitorder="little"))
    return idx[idx < n_bins]


def sanitize_samples(rgbs: np.ndarray, depths: np.ndarray):
    """
    Split samples into accepted ones and count clamped colors.

    Returns:
        (keep mask, clamped rgb array, number of clamped samples)
    """
    finite = np.all(np.isfinite(rgbs), axis=1) & np.isfinite(depths) & (depths > 0.0)
    out_of_range = np.any((rgbs < 0.0) | (rgbs > 1.0), axis=1) & finite
    clamped = np.clip(rgbs, 0.0, 1.0)
    return finite, clamped, int(np.count_nonzero(out_of_range))


class VoxelStats:
    """Online statistics of one primitive. Size is fixed by the lattice, not by n."""

    __slots__ = ("n_bins", "_masks", "_counts", "_means", "_m2s", "_rho")

    def __init__(self, n_bins: int, masks=None, counts=None, means=None, m2s=None, rho=None):
        self.n_bins = int(n_bins)
        n_words = (self.n_bins + 63) // 64
        self._masks = np.zeros((1, n_words), dtype=np.uint64) if masks is None else masks
        self._counts = np.zeros(1, dtype=np.int64) if counts is None else counts
        self._means = np.zeros((1, 3), dtype=np.float64) if means is None else means
        self._m2s = np.zeros((1, 6), dtype=np.float64) if m2s is None else m2s
        self._rho = np.zeros(1, dtype=np.float64) if rho is None else rho

    @classmethod
    def empty(cls, n_bins: int) -> "VoxelStats":
        return cls(n_bins)

    # row views used by the batch kernels
    @property
    def arrays(self):
        return self._masks, self._counts, self._means, self._m2s, self._rho

    @property
    def n(self) -> int:
        return int(self._counts[0])

    @property
    def mean(self) -> np.ndarray:
        return self._means[0].copy()

    @property
    def m2(self) -> np.ndarray:
        return self._m2s[0].copy()

    @property
    def bin_mask(self) -> np.ndarray:
        return self._masks[0].copy()

    @property
    def rho_max(self) -> float:
        return float(self._rho[0])

    def m2_matrix(self) -> np.ndarray:
        xx, yy, zz, xy, xz, yz = self._m2s[0]
        return np.array([[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]])

    def trace(self) -> float:
        return float(self._m2s[0, 0] + self._m2s[0, 1] + self._m2s[0, 2])

    def popcount(self) -> int:
        return _popcount(self._masks[0])

    def visited_bins(self) -> np.ndarray:
        return _bits(self._masks[0], self.n_bins)

    def update(self, lattice: Lattice, direction, rgb, depth: float) -> "VoxelStats":
        """Fold one observation in place and return self."""
        if lattice.n_bins != self.n_bins:
            raise StatsError(f"lattice has {lattice.n_bins} bins, stats expect {self.n_bins}")
        rgb = np.asarray(rgb, dtype=np.float64).reshape(1, 3)
        depths = np.array([depth], dtype=np.float64)
        keep, clamped, n_clamped = sanitize_samples(rgb, depths)
        if not keep[0]:
            raise StatsError(f"non-finite or non-positive sample rejected: rgb={rgb[0]}, depth={depth}")
        if n_clamped:
            logger.warning("rgb %s outside [0, 1], clamped", rgb[0])
        d = np.ascontiguousarray(direction, dtype=np.float64).reshape(1, 3)
        norm = float(np.linalg.norm(d))
        if not np.isfinite(norm) or abs(norm - 1.0) > 1e-6:
            raise StatsError("observation direction must be unit-norm")
        bins = np.empty(1, dtype=np.int64)
        nearest_bins_kernel(lattice.centers, d, bins)
        ingest_kernel(*self.arrays, np.zeros(1, dtype=np.int64), bins, clamped, depths)
        return self

    def delta(self) -> float:
        """Appearance consistency in [0, 1]; 1 when fewer than two samples exist."""
        return float(delta_kernel(self._counts[0], self._m2s[0]))

    def merge(self, other: "VoxelStats") -> "VoxelStats":
        """Pairwise-merge two partial states into a new one."""
        if other.n_bins != self.n_bins:
            raise StatsError(f"cannot merge stats over {self.n_bins} and {other.n_bins} bins")
        out = self.copy()
        merge_rows(*out.arrays, 0, *other.arrays, 0)
        return out

    def copy(self) -> "VoxelStats":
        return VoxelStats(self.n_bins, *(a.copy() for a in self.arrays))

    def to_bytes(self, key: int = -1) -> bytes:
        rec = np.zeros(1, dtype=record_dtype(self._masks.shape[1]))
        rec["key"] = key
        rec["mask"][0] = self._masks[0]
        rec["n"] = self._counts[0]
        rec["mean"][0] = self._means[0]
        rec["m2"][0] = self._m2s[0]
        rec["rho_max"] = self._rho[0]
        return rec.tobytes()

    @classmethod
    def from_bytes(cls, n_bins: int, data: bytes) -> "VoxelStats":
        n_words = (n_bins + 63) // 64
        dtype = record_dtype(n_words)
        if len(data) != dtype.itemsize:
            raise StatsError(f"record is {len(data)} bytes, expected {dtype.itemsize}")
        rec = np.frombuffer(data, dtype=dtype)
        return cls(
            n_bins,
            rec["mask"].astype(np.uint64).reshape(1, n_words),
            rec["n"].astype(np.int64),
            rec["mean"].astype(np.float64).reshape(1, 3),
            rec["m2"].astype(np.float64).reshape(1, 6),
            rec["rho_max"].astype(np.float64),
        )

    def __repr__(self) -> str:
        return (f"VoxelStats(n={self.n}, bins={self.popcount()}, mean={np.round(self.mean, 4)}, "
                f"trace={self.trace():.6g}, rho_max={self.rho_max:.4g})")


class StatsTable:
    """
    Sparse key -> VoxelStats store laid out as parallel arrays.

    Keys are packed voxel indices (see world_map.pack_keys). Rows never move,
    so a row index stays valid for the lifetime of the table.
    """

    def __init__(self, n_bins: int, capacity: int = 1024):
        self.n_bins = int(n_bins)
        self.n_words = (self.n_bins + 63) // 64
        self.size = 0
        self.clamped_samples = 0
        self.rejected_samples = 0
        self._rows: Dict[int, int] = {}
        self._alloc(max(1, capacity))

    def _alloc(self, capacity: int) -> None:
        self.row_keys = np.zeros(capacity, dtype=np.int64)
        self.masks = np.zeros((capacity, self.n_words), dtype=np.uint64)
        self.counts = np.zeros(capacity, dtype=np.int64)
        self.means = np.zeros((capacity, 3), dtype=np.float64)
        self.m2s = np.zeros((capacity, 6), dtype=np.float64)
        self.rho = np.zeros(capacity, dtype=np.float64)

    def _grow(self, needed: int) -> None:
        capacity = len(self.counts)
        if needed <= capacity:
            return
        while capacity < needed:
            capacity *= 2
        old = (self.row_keys, self.masks, self.counts, self.means, self.m2s, self.rho)
        self._alloc(capacity)
        for dst, src in zip((self.row_keys, self.masks, self.counts, self.means, self.m2s, self.rho), old):
            dst[: self.size] = src[: self.size]

    @property
    def arrays(self):
        return self.masks, self.counts, self.means, self.m2s, self.rho

    def __len__(self) -> int:
        return self.size

    def __contains__(self, key) -> bool:
        return int(key) in self._rows

    def keys(self) -> np.ndarray:
        return self.row_keys[: self.size].copy()

    def row(self, key) -> Optional[int]:
        return self._rows.get(int(key))

    def rows_for(self, keys: Iterable[int], create: bool = False) -> np.ndarray:
        """Row per key; -1 for unknown keys unless create is set."""
        keys = np.asarray(keys, dtype=np.int64).ravel()
        out = np.empty(len(keys), dtype=np.int64)
        uniq, inverse = np.unique(keys, return_inverse=True)
        uniq_rows = np.empty(len(uniq), dtype=np.int64)
        fresh = []
        for i, key in enumerate(uniq.tolist()):
            row = self._rows.get(key)
            if row is None:
                if create:
                    row = self.size + len(fresh)
                    fresh.append(key)
                else:
                    row = -1
            uniq_rows[i] = row
        if fresh:
            self._grow(self.size + len(fresh))
            for key in fresh:
                self._rows[key] = self.size
                self.row_keys[self.size] = key
                self.size += 1
        out[:] = uniq_rows[inverse]
        return out

    def prepare_samples(self, lattice: Lattice, keys, dirs, rgbs, depths) -> Tuple[Tuple[np.ndarray, ...], Dict]:
        """
        Sanitize a batch, bin its directions and reserve rows for new keys.

        Returns:
            ((rows, bins, rgbs, depths), report) ready for apply_samples.
        """
        if lattice.n_bins != self.n_bins:
            raise StatsError(f"lattice has {lattice.n_bins} bins, table expects {self.n_bins}")
        keys = np.asarray(keys, dtype=np.int64).ravel()
        rgbs = np.asarray(rgbs, dtype=np.float64).reshape(-1, 3)
        depths = np.asarray(depths, dtype=np.float64).ravel()
        dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
        keep, clamped, n_clamped = sanitize_samples(rgbs, depths)
        rejected = int(len(keep) - np.count_nonzero(keep))
        keys, dirs, clamped, depths = keys[keep], dirs[keep], clamped[keep], depths[keep]
        bins = np.empty(len(keys), dtype=np.int64)
        nearest_bins_kernel(lattice.centers, dirs, bins)
        rows = self.rows_for(keys, create=True)
        self.clamped_samples += n_clamped
        self.rejected_samples += rejected
        report = {
            "samples": int(len(keys)),
            "rejected": rejected,
            "clamped": n_clamped,
            "voxels": int(len(np.unique(keys))),
        }
        return (rows, bins, np.ascontiguousarray(clamped), np.ascontiguousarray(depths)), report

    def apply_samples(self, rows, bins, rgbs, depths) -> None:
        """Welford-fold prepared samples into their rows, in order."""
        ingest_kernel(*self.arrays, rows, bins, rgbs, depths)

    def update_samples(self, lattice: Lattice, keys, dirs, rgbs, depths) -> Dict:
        """
        Fold a batch of observations in sample order.

        Returns:
            Dict with accepted/rejected/clamped sample counts and distinct voxels touched.
        """
        batch, report = self.prepare_samples(lattice, keys, dirs, rgbs, depths)
        self.apply_samples(*batch)
        return report

    def get(self, key) -> Optional[VoxelStats]:
        row = self.row(key)
        if row is None:
            return None
        return VoxelStats(
            self.n_bins,
            self.masks[row: row + 1].copy(),
            self.counts[row: row + 1].copy(),
            self.means[row: row + 1].copy(),
            self.m2s[row: row + 1].copy(),
            self.rho[row: row + 1].copy(),
        )

    def put(self, key, stats: VoxelStats) -> None:
        if stats.n_bins != self.n_bins:
            raise StatsError(f"stats over {stats.n_bins} bins do not fit a {self.n_bins}-bin table")
        row = int(self.rows_for([key], create=True)[0])
        for dst, src in zip(self.arrays, stats.arrays):
            dst[row] = src[0]

    def merge_from(self, other: "StatsTable") -> None:
        """Chan-merge another table into this one, key by key."""
        if other.n_bins != self.n_bins:
            raise StatsError(f"cannot merge tables over {self.n_bins} and {other.n_bins} bins")
        if other.size == 0:
            return
        src_rows = np.arange(other.size, dtype=np.int64)
        dst_rows = self.rows_for(other.row_keys[: other.size], create=True)
        merge_table_kernel(*self.arrays, dst_rows, *other.arrays, src_rows)
        self.clamped_samples += other.clamped_samples
        self.rejected_samples += other.rejected_samples

    def deltas(self, rows: Optional[np.ndarray] = None) -> np.ndarray:
        rows = np.arange(self.size) if rows is None else np.asarray(rows)
        return np.array([delta_kernel(self.counts[r], self.m2s[r]) for r in rows.tolist()], dtype=np.float64)

    def to_records(self) -> np.ndarray:
        rec = np.zeros(self.size, dtype=record_dtype(self.n_words))
        rec["key"] = self.row_keys[: self.size]
        rec["mask"] = self.masks[: self.size]
        rec["n"] = self.counts[: self.size]
        rec["mean"] = self.means[: self.size]
        rec["m2"] = self.m2s[: self.size]
        rec["rho_max"] = self.rho[: self.size]
        return rec

    @classmethod
    def from_records(cls, n_bins: int, records: np.ndarray) -> "StatsTable":
        table = cls(n_bins, capacity=max(1, len(records)))
        if len(np.unique(records["key"])) != len(records):
            raise StatsError("duplicate voxel keys in snapshot records")
        count = len(records)
        table.row_keys[:count] = records["key"]
        table.masks[:count] = records["mask"].reshape(count, table.n_words)
        table.counts[:count] = records["n"]
        table.means[:count] = records["mean"]
        table.m2s[:count] = records["m2"]
        table.rho[:count] = records["rho_max"]
        table.size = count
        table._rows = {int(k): i for i, k in enumerate(records["key"].tolist())}
        return table

    @property
    def bytes_per_voxel(self) -> int:
        return record_dtype(self.n_words).itemsize

    def nbytes(self) -> int:
        return self.size * self.bytes_per_voxel
