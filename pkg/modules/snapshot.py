"""
Snapshot Module
Versioned little-endian map snapshots: a fixed header, one record per stats
voxel and the run-length-encoded occupancy grid, guarded by a CRC32.
"""

import logging
import struct
import zlib
from typing import Dict, Optional

import numpy as np

from .errors import StatsError
from .fibsphere import Lattice, build_lattice
from .voxel_stats import StatsTable, record_dtype
from .world_map import WorldMap

logger = logging.getLogger(__name__)

MAGIC = b"RFSNAP\x00\x01"
VERSION = 1
# magic, version, flags, bounds_min[3], bounds_max[3], voxel, cell, max_range,
# n_bins, n_words, n_voxels, dims[3], frames, n_runs, crc32
HEADER = struct.Struct("<8sHH3d3ddddIIQ3qQQI")
RUN_DTYPE = np.dtype([("state", "u1"), ("length", "<u4")])


def encode_runs(states: np.ndarray) -> np.ndarray:
    states = np.asarray(states, dtype=np.uint8).ravel()
    if states.size == 0:
        return np.zeros(0, dtype=RUN_DTYPE)
    starts = np.concatenate([[0], np.flatnonzero(np.diff(states)) + 1])
    lengths = np.diff(np.append(starts, states.size))
    runs = np.zeros(len(starts), dtype=RUN_DTYPE)
    runs["state"] = states[starts]
    runs["length"] = lengths
    return runs


def decode_runs(runs: np.ndarray) -> np.ndarray:
    return np.repeat(runs["state"], runs["length"].astype(np.int64))


def save_snapshot(world: WorldMap, path: str) -> Dict:
    """Write a map snapshot and return a small summary."""
    records = world.stats.to_records()
    runs = encode_runs(world.occupancy)
    body = records.tobytes() + runs.tobytes()
    header = HEADER.pack(
        MAGIC, VERSION, 0,
        *world.bounds_min.tolist(), *world.bounds_max.tolist(),
        world.voxel_size, world.cell_size, world.max_range,
        world.lattice.n_bins, world.lattice.n_words, len(records),
        *(int(d) for d in world.dims), world.frames_ingested, len(runs),
        zlib.crc32(body) & 0xFFFFFFFF,
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(body)
    info = {"voxels": len(records), "runs": len(runs), "bytes": HEADER.size + len(body)}
    logger.info("snapshot %s: %s", path, info)
    return info


def load_snapshot(path: str, lattice: Optional[Lattice] = None) -> WorldMap:
    """
    Read a snapshot back into a WorldMap.

    The lattice is rebuilt from the stored bin count unless one is given, in
    which case its size must match.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < HEADER.size:
        raise StatsError(f"{path}: truncated snapshot header")
    fields = HEADER.unpack_from(raw)
    magic, version = fields[0], fields[1]
    if magic != MAGIC:
        raise StatsError(f"{path}: not a map snapshot")
    if version != VERSION:
        raise StatsError(f"{path}: unsupported snapshot version {version}")
    bounds_min, bounds_max = np.array(fields[3:6]), np.array(fields[6:9])
    voxel_size, cell_size, max_range = fields[9:12]
    n_bins, n_words, n_voxels = fields[12:15]
    dims = np.array(fields[15:18], dtype=np.int64)
    frames, n_runs, crc = fields[18:21]

    body = raw[HEADER.size:]
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise StatsError(f"{path}: checksum mismatch")
    rec_dtype = record_dtype(n_words)
    rec_bytes = n_voxels * rec_dtype.itemsize
    if len(body) != rec_bytes + n_runs * RUN_DTYPE.itemsize:
        raise StatsError(f"{path}: body is {len(body)} bytes, header expects {rec_bytes + n_runs * RUN_DTYPE.itemsize}")

    if lattice is None:
        lattice = build_lattice(n_bins=n_bins)
    elif lattice.n_bins != n_bins:
        raise StatsError(f"{path}: snapshot uses {n_bins} bins, lattice has {lattice.n_bins}")
    world = WorldMap(bounds_min, bounds_max, lattice, voxel_size=voxel_size,
                     cell_size=cell_size, max_range=max_range)
    if not np.array_equal(world.dims, dims):
        raise StatsError(f"{path}: grid dims {dims.tolist()} do not match bounds")

    records = np.frombuffer(body, dtype=rec_dtype, count=n_voxels)
    world.stats = StatsTable.from_records(n_bins, records)
    occupancy = decode_runs(np.frombuffer(body, dtype=RUN_DTYPE, count=n_runs, offset=rec_bytes))
    if occupancy.size != world.occupancy.size:
        raise StatsError(f"{path}: occupancy has {occupancy.size} cells, expected {world.occupancy.size}")
    world.occupancy[:] = occupancy
    world._register_voxels(world.stats.keys())
    world.frames_ingested = int(frames)
    return world
