# modules/bench.py
import logging
import math
import time

import numpy as np

from ._jit import set_worker_count
from .fibsphere import build_lattice
from .host_info import describe_host, rss_bytes
from .planner import uniform_directions
from .renderability import batch_renderability
from .voxel_stats import VoxelStats
from .world_map import WorldMap, pack_keys

logger = logging.getLogger(__name__)

QUERY_COLUMNS = ('voxels', 'best_ms', 'median_ms', 'us_per_voxel')
KEYFRAME_COLUMNS = ('keyframes', 'update_ms', 'query_ms', 'total_ms', 'samples_per_voxel', 'bytes_per_voxel')


def _timed(fn, *args):
	tick = time.perf_counter()
	out = fn(*args)
	return (time.perf_counter() - tick) * 1e3, out


def synthetic_world(lattice, n_voxels, rng, voxel_size=0.05, cell_size=0.2):
	"""A cubic map holding n_voxels random stats voxels, each observed a few times."""
	side_voxels = int(math.ceil((8 * n_voxels) ** (1.0 / 3.0)))
	per_cell = int(round(cell_size / voxel_size))
	side_voxels = per_cell * int(math.ceil(side_voxels / per_cell))
	world = WorldMap(np.zeros(3), np.full(3, side_voxels * voxel_size), lattice,
					 voxel_size=voxel_size, cell_size=cell_size)
	flat = rng.choice(side_voxels ** 3, size=n_voxels, replace=False)
	keys = pack_keys(np.stack(np.unravel_index(flat, (side_voxels,) * 3), axis=1))
	return world, keys


def observe(world, keys, rng, position=None):
	"""One synthetic keyframe: every key seen once from a random direction, or from `position`."""
	if position is None:
		dirs = uniform_directions(rng, len(keys))
		depths = rng.uniform(0.5, 3.0, len(keys))
	else:
		offsets = world.voxel_centers(keys) - position
		depths = np.linalg.norm(offsets, axis=1)
		dirs = offsets / depths[:, None]
	rgbs = rng.uniform(0.0, 1.0, (len(keys), 3))
	return world.stats.update_samples(world.lattice, keys, dirs, rgbs, depths)


def bench_query(lattice, voxel_counts, repeats, rng):
	rows = []
	for n in voxel_counts:
		world, keys = synthetic_world(lattice, n, rng)
		for _ in range(3):
			observe(world, keys, rng)
		position = (world.bounds_min + world.bounds_max) / 2.0
		batch_renderability(world, keys[:16], position)  # compile / warm caches
		times = [_timed(batch_renderability, world, keys, position)[0] for _ in range(repeats)]
		best = min(times)
		rows.append({
			'voxels': int(n),
			'best_ms': best,
			'median_ms': float(np.median(times)),
			'us_per_voxel': best * 1e3 / n,
		})
		logger.info("query %d voxels: best %.2f ms", n, best)
	return rows


def bench_keyframes(lattice, keyframe_counts, n_voxels, repeats, rng):
	"""
	Stream keyframes over one fixed voxel set and time update+query at each
	requested keyframe count (median of the last `repeats` frames before it).
	"""
	world, keys = synthetic_world(lattice, n_voxels, rng)
	last = max(keyframe_counts)
	marks = set(keyframe_counts)
	update_ms, query_ms = [], []
	rows = []
	observe(world, keys[:16], rng)
	batch_renderability(world, keys[:16], world.bounds_max / 2.0)
	for k in range(1, last + 1):
		position = rng.uniform(world.bounds_min, world.bounds_max)
		t_update, _ = _timed(observe, world, keys, rng, position)
		t_query, _ = _timed(batch_renderability, world, keys, position)
		update_ms.append(t_update)
		query_ms.append(t_query)
		if k in marks:
			window = slice(max(0, k - repeats), k)
			u = float(np.median(update_ms[window]))
			q = float(np.median(query_ms[window]))
			rows.append({
				'keyframes': k,
				'update_ms': u,
				'query_ms': q,
				'total_ms': u + q,
				'samples_per_voxel': float(np.mean(world.stats.counts[:world.stats.size])),
				'bytes_per_voxel': world.stats.bytes_per_voxel,
			})
			logger.info("keyframe %d: update %.2f ms, query %.2f ms", k, u, q)
	return rows


def state_size(lattice, updates, rng):
	"""Serialized per-voxel state after 1 and after `updates` observations."""
	stats = VoxelStats.empty(lattice.n_bins)
	dirs = uniform_directions(rng, updates)
	stats.update(lattice, dirs[0], rng.uniform(0, 1, 3), 1.0)
	first = len(stats.to_bytes())
	for d in dirs[1:]:
		stats.update(lattice, d, rng.uniform(0, 1, 3), rng.uniform(0.5, 3.0))
	return {'bytes_after_1': first, f'bytes_after_{updates}': len(stats.to_bytes()), 'constant': first == len(stats.to_bytes())}


def run_bench(n_bins=64, voxel_counts=(1000, 10000, 100000), keyframe_counts=(10, 50, 100, 500),
			  keyframe_voxels=2000, repeats=5, workers=1, seed=0):
	"""Latency and memory report; pinned to `workers` numba threads."""
	threads = set_worker_count(workers)
	rng = np.random.default_rng(seed)
	lattice = build_lattice(n_bins=n_bins)
	query = bench_query(lattice, voxel_counts, repeats, rng)
	keyframes = bench_keyframes(lattice, keyframe_counts, keyframe_voxels, repeats, rng)
	summary = {
		'workers': threads,
		'n_bins': lattice.n_bins,
		'state': state_size(lattice, max(keyframe_counts), rng),
		'rss_mb': round(rss_bytes() / 2 ** 20, 2),
		'host': describe_host(),
	}
	by_k = {row['keyframes']: row['total_ms'] for row in keyframes}
	if 50 in by_k and 500 in by_k and by_k[50] > 0:
		summary['ratio_500_vs_50'] = by_k[500] / by_k[50]
	return {'query': query, 'keyframes': keyframes, 'summary': summary}
