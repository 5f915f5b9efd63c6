import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, stats

from symbridge import combinatorics as comb, ensemble
from symbridge.combinatorics import PairMeasure
from symbridge.errors import ConfigError, DomainError, PreconditionError
from symbridge.grid import DensityOnGrid, Grid, Partition

UNIT = ensemble.UniformBox([0.0], [1.0])


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.01, 10), st.integers(1, 50), st.integers(0, 2**32))
def test_bridge_endpoints_bit_exact(x, y, beta, steps, seed):
    path = ensemble.sample_bridge([x], [y], beta, steps, np.random.default_rng(seed))
    assert path.points[0, 0] == x and path.points[-1, 0] == y
    assert path.times[-1] == beta and len(path.times) == steps + 1


def test_bridge_marginals_and_covariance():
    beta, steps, n = 2.0, 8, 40_000
    x, y = np.full((n, 1), -0.5), np.full((n, 1), 1.5)
    paths = ensemble.sample_bridges(x, y, beta, steps, np.random.default_rng(3))[:, :, 0]
    t = np.linspace(0, beta, steps + 1)
    for j in (2, 4, 6):
        mean = -0.5 + t[j] / beta * 2.0
        var = 2.0 * t[j] * (beta - t[j]) / beta
        z = (paths[:, j].mean() - mean) / math.sqrt(var / n)
        assert abs(z) < 4
        assert paths[:, j].var() == pytest.approx(var, rel=0.03)
    # Cov(B_s, B_t) = 2 s (beta - t) / beta
    cov = np.cov(paths[:, 2], paths[:, 6])[0, 1]
    assert cov == pytest.approx(2 * t[2] * (beta - t[6]) / beta, rel=0.05)


def test_bridge_input_validation():
    with pytest.raises(DomainError):
        ensemble.sample_bridge([0.0], [0.0, 1.0], 1.0, 4, 0)
    with pytest.raises(DomainError):
        ensemble.sample_bridges([[0.0]], [[0.0]], 1.0, 0, 0)


def test_sample_sym_structure_and_determinism():
    s1 = ensemble.sample_sym(UNIT, 50, 1.0, 8, seed=9, index=4)
    s2 = ensemble.sample_sym(UNIT, 50, 1.0, 8, seed=9, index=4)
    s3 = ensemble.sample_sym(UNIT, 50, 1.0, 8, seed=9, index=5)
    np.testing.assert_array_equal(np.sort(s1.sigma), np.arange(50))
    np.testing.assert_array_equal(s1.ends, s1.starts[s1.sigma])
    np.testing.assert_array_equal(s1.paths[:, -1], s1.ends)
    np.testing.assert_array_equal(s1.paths, s2.paths)
    assert not np.array_equal(s1.starts, s3.starts)


def test_sample_many_independent_of_thread_count():
    def draw(i):
        return ensemble.sample_sym(UNIT, 20, 1.0, 4, seed=1, index=i).paths

    a = ensemble.sample_many(draw, 12, threads=1)
    b = ensemble.sample_many(draw, 12, threads=4)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)


def test_permutation_is_uniform():
    n, draws = 4, 12_000
    observed = {}
    for i in range(draws):
        s = ensemble.sample_sym(UNIT, n, 1.0, 1, seed=2, index=i, with_paths=False)
        t = comb.cycle_type(s.sigma)
        observed[t] = observed.get(t, 0) + 1
    types = list(comb.cycle_types(n))
    obs = np.array([observed.get(t, 0) for t in types])
    exp = np.array([t.class_size() / math.factorial(n) * draws for t in types])
    assert stats.chisquare(obs, exp).pvalue > 1e-3


def test_atoms_sampling_frequencies():
    m = ensemble.Atoms([0.1, 0.5, 0.9], [1, 2, 5])
    s = ensemble.sample_sym(m, 40_000, 1.0, 1, seed=0, with_paths=False)
    freq = np.array([(s.starts[:, 0] == p).mean() for p in (0.1, 0.5, 0.9)])
    np.testing.assert_allclose(freq, [1 / 8, 2 / 8, 5 / 8], atol=0.01)


def test_pair_weight_is_recorded():
    s = ensemble.sample_sym(UNIT, 30, 1.0, 2, g=lambda x, y: np.exp(x[:, 0] * y[:, 0]), seed=0)
    assert s.log_weight == pytest.approx(float(np.sum(s.starts[:, 0] * s.ends[:, 0])))


def test_initial_measure_rejects_zero_mass():
    with pytest.raises(ConfigError):
        ensemble.initial_measure({"type": "uniform", "lo": [0], "hi": [0]})
    with pytest.raises(ConfigError):
        ensemble.initial_measure({"type": "atoms", "points": [0.5], "weights": [0.0]})


def test_endpoint_pairs_law_of_large_numbers():
    part = Partition.uniform(0.0, 1.0, 3, weights=None)
    means = np.mean([
        ensemble.endpoint_pairs(ensemble.sample_sym(UNIT, 3000, 1.0, 1, seed=5, index=i, with_paths=False),
                                part).entries
        for i in range(200)
    ], axis=0)
    assert 0.5 * np.abs(means - np.outer(part.weights, part.weights)).sum() < 0.01


def test_mixture_hits_pair_counts_exactly():
    part = Partition.uniform([0, 0], [1, 1], [2, 1])
    eta = PairMeasure.from_counts([[3, 5], [5, 7]])
    s = ensemble.sample_mixture(eta, 20, part, 0.5, 6, np.random.default_rng(0))
    assert s.sigma is None
    np.testing.assert_array_equal(ensemble.endpoint_pairs(s, part).counts, eta.counts)
    np.testing.assert_array_equal(s.paths[:, 0], s.starts)
    np.testing.assert_array_equal(s.paths[:, -1], s.ends)


def test_mixture_rejects_off_grid_eta():
    part = Partition.uniform(0.0, 1.0, 2)
    with pytest.raises(PreconditionError):
        ensemble.sample_mixture(PairMeasure.normalized([[1, 1], [1, 1.5]]), 10, part, 1.0, 2, 0)


def test_mixture_end_law_matches_direct_integration():
    part = Partition.uniform(0.0, 1.0, 2)
    beta = 0.3
    edges, probs = ensemble.mixture_end_law(part, 0, 1, beta, bins=5)
    scale = math.sqrt(2 * beta)

    def bin_prob(j, x):
        z = stats.norm.cdf(1.0, x, scale) - stats.norm.cdf(0.5, x, scale)
        return (stats.norm.cdf(edges[j + 1], x, scale) - stats.norm.cdf(edges[j], x, scale)) / z

    ref = [integrate.quad(lambda x: bin_prob(j, x), 0.0, 0.5)[0] / 0.5 for j in range(5)]
    np.testing.assert_allclose(probs, ref, atol=1e-10)


def test_mixture_end_law_matches_sampler():
    part = Partition.uniform(0.0, 1.0, 2)
    n = 50_000
    eta = PairMeasure.from_counts([[0, n // 2], [n // 2, 0]])
    s = ensemble.sample_mixture(eta, n, part, 0.3, 1, np.random.default_rng(1), with_paths=False)
    edges, probs = ensemble.mixture_end_law(part, 0, 1, 0.3, bins=10)
    from_first = part.labels(s.starts) == 0
    hist, _ = np.histogram(s.ends[from_first, 0], bins=edges)
    assert 0.5 * np.abs(hist / hist.sum() - probs).sum() < 0.02


def test_occupation_counts_overflow():
    grid = Grid.box(0.0, 1.0, 10)
    s = ensemble.sample_sym(UNIT, 50, 5.0, 20, seed=0)
    occ = ensemble.occupation(s, grid)
    assert occ.flagged and occ.total == 50 * 21
    inside = occ.total - occ.overflow
    assert occ.integral() == pytest.approx(inside / occ.total)


def test_exact_canonical_sampler_reproduces_ground_state():
    grid = Grid.box(0.0, 1.0, 60)
    target = DensityOnGrid.ground_state(grid).values
    occ = np.mean([
        ensemble.occupation(ensemble.sample_canonical(grid, 64, 1.0, 16, ensemble.spawn_rng(7, i)), grid).values
        for i in range(100)
    ], axis=0)
    assert np.abs(occ - target).sum() * grid.cell_volume < 0.05
