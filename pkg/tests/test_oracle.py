import math

import numpy as np
import pytest

from modules.fibsphere import build_lattice
from modules.oracle import (
    PAIRWISE_LIMIT,
    FullHistory,
    batch_cov_trace,
    exact_bias,
    exact_delta,
    exact_kappa,
    pairwise_discrepancy,
)
from modules.renderability import bias
from modules.voxel_stats import StatsTable, VoxelStats

LATTICE = build_lattice(n_bins=64)


def _dirs(rng, count):
    v = rng.normal(size=(count, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_exact_bias_edges():
    assert exact_bias(FullHistory(), [0.0, 0.0, 1.0]) == (0.0, 2)
    h = FullHistory()
    h.add([0.0, 1.0, 0.0], [0.1, 0.1, 0.1], 1.0)
    h.add([0.0, 0.0, 1.0], [0.1, 0.1, 0.1], 1.0)
    cos, kappa = exact_bias(h, [0.0, 0.0, 1.0])
    assert cos == 1.0 and kappa == 1
    assert len(h) == 2


def test_exact_kappa_without_inflation():
    q = np.array([0.0, 0.0, 1.0])
    off = np.array([math.sin(0.1), 0.0, math.cos(0.1)])
    assert exact_kappa([off], q) == 2
    assert exact_kappa([off], q, tau=0.2) == 1


def test_exact_delta_examples():
    h = FullHistory()
    for _ in range(4):
        h.add([1.0, 0.0, 0.0], [0.2, 0.4, 0.6], 1.0)
    assert exact_delta(h) == 1.0
    h = FullHistory()
    h.add([1.0, 0.0, 0.0], [0.0, 0.0, 0.0], 1.0)
    h.add([1.0, 0.0, 0.0], [1.0, 1.0, 1.0], 1.0)
    # 1 - 3 clamps to 0
    assert pairwise_discrepancy(h.colors) == 3.0
    assert exact_delta(h) == 0.0
    assert exact_delta(FullHistory()) == 1.0


def test_batch_trace_examples():
    assert batch_cov_trace(np.tile([0.3, 0.3, 0.3], (10, 1))) == 0.0
    assert batch_cov_trace([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]) == pytest.approx(1.5)
    assert batch_cov_trace([[0.5, 0.5, 0.5]]) == 0.0


def test_oracles_are_order_invariant():
    # dyadic colors and a power-of-two count keep every sum exact
    gen = np.random.default_rng(0)
    z = gen.integers(0, 9, (32, 3)) / 8.0
    shuffled = gen.permutation(z)
    assert pairwise_discrepancy(z) == pairwise_discrepancy(shuffled)
    assert batch_cov_trace(z) == batch_cov_trace(shuffled)


def test_binned_bias_within_bound_of_exact():
    gen = np.random.default_rng(99)
    rho = LATTICE.bin_radius
    repeat_bound = 1.0 - math.cos(rho)
    chord_bound = 2.0 * math.sin(rho / 2.0)
    violations = 0
    for trial in range(10_000):
        history = FullHistory()
        stats = VoxelStats.empty(64)
        for d in _dirs(gen, int(gen.integers(1, 6))):
            history.add(d, (0.5, 0.5, 0.5), 1.0)
            stats.update(LATTICE, d, (0.5, 0.5, 0.5), 1.0)
        if trial % 2:
            # query repeats a historical direction
            q, bound = history.dirs[int(gen.integers(len(history)))], repeat_bound
        else:
            q, bound = _dirs(gen, 1)[0], chord_bound
        exact, _ = exact_bias(history, q)
        binned = bias(stats, LATTICE, q).cos_theta
        if abs(binned - exact) > bound + 1e-12:
            violations += 1
    assert violations == 0


def _streams(gen, count, max_len):
    lengths = np.maximum(2, np.exp(gen.uniform(math.log(2), math.log(max_len), count)).astype(int))
    keys = np.repeat(np.arange(count), lengths)
    return keys, lengths, gen.uniform(0.0, 1.0, (len(keys), 3))


@pytest.fixture(scope="module")
def long_streams():
    """1000 streams of up to 10^4 colors folded into one table."""
    gen = np.random.default_rng(5)
    keys, lengths, rgbs = _streams(gen, 1000, 10_000)
    table = StatsTable(64, capacity=1000)
    table.update_samples(LATTICE, keys, _dirs(gen, len(keys)), rgbs, gen.uniform(0.5, 3.0, len(keys)))
    starts = np.concatenate([[0], np.cumsum(lengths)])
    streams = [rgbs[starts[i]: starts[i + 1]] for i in range(len(lengths))]
    return table, streams


def test_long_history_form_matches_explicit_pairs():
    gen = np.random.default_rng(6)
    z = gen.uniform(0.0, 1.0, (PAIRWISE_LIMIT + 88, 3))
    d = z[:, None, :] - z[None, :, :]
    explicit = float(np.sum(d * d)) / (len(z) * (len(z) - 1))
    assert pairwise_discrepancy(z) == pytest.approx(explicit, rel=1e-12)


@pytest.mark.slow
def test_welford_matches_batch_on_many_long_streams(long_streams):
    table, streams = long_streams
    rows = table.rows_for(np.arange(len(streams)))
    assert max(len(z) for z in streams) > 5000
    for z, row in zip(streams, rows.tolist()):
        n = int(table.counts[row])
        trace = float(table.m2s[row, :3].sum())
        assert n == len(z)
        assert trace / (n - 1) == pytest.approx(batch_cov_trace(z), rel=1e-9)


@pytest.mark.slow
def test_pairwise_identity_on_the_same_streams(long_streams):
    table, streams = long_streams
    rows = table.rows_for(np.arange(len(streams)))
    for z, row in zip(streams, rows.tolist()):
        trace = float(table.m2s[row, :3].sum())
        assert pairwise_discrepancy(z) == pytest.approx(2.0 * trace / (len(z) - 1), rel=1e-9)
