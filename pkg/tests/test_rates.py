import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import rel_entr

from symbridge import rates
from symbridge.errors import ConfigError, ConvergenceError, DomainError, GuardError
from symbridge.grid import DensityOnGrid, Grid, GridFunction, Partition


def bumpy_density(grid):
    x = grid.points[:, 0]
    return DensityOnGrid.normalized(grid, np.sin(np.pi * x) ** 2 * (1 + 0.5 * np.cos(2 * np.pi * x)))


def random_prob(rng, shape):
    a = rng.exponential(size=shape)
    return a / a.sum()


def single_cell_log_mean(beta, terms=2000):
    """log of the mean of the killed heat kernel over [0,1]^2 (sine series)."""
    k = np.arange(1, terms + 1, 2)
    return math.log(np.sum(8.0 / (k * np.pi) ** 2 * np.exp(-beta * (k * np.pi) ** 2)))


# -- entropies -------------------------------------------------------------


@given(st.integers(0, 2**31))
def test_relative_entropy_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    q, r = random_prob(rng, (3, 3)), random_prob(rng, (3, 3))
    assert rates.relative_entropy(q, r) == pytest.approx(rel_entr(q, r).sum(), rel=1e-12, abs=1e-15)


def test_relative_entropy_off_support_is_infinite():
    assert rates.relative_entropy([[0.5, 0.5]], [[1.0, 0.0]]) == math.inf
    assert rates.relative_entropy([[1.0, 0.0]], [[0.5, 0.5]]) == pytest.approx(math.log(2))


def test_pair_entropy_vanishes_on_products():
    m = np.array([0.2, 0.3, 0.5])
    qbar = np.array([0.6, 0.1, 0.3])
    assert rates.pair_entropy(np.outer(qbar, m), m) == pytest.approx(0.0, abs=1e-15)


def test_donsker_varadhan_ground_state():
    assert rates.donsker_varadhan(DensityOnGrid.ground_state(Grid.box(0.0, 1.0, 400))) == pytest.approx(
        math.pi**2, abs=0.01)


def test_donsker_varadhan_box_in_two_dimensions():
    grid = Grid.box([0, 0], [1, 2], [80, 160])
    energy = rates.donsker_varadhan(DensityOnGrid.ground_state(grid))
    assert energy == pytest.approx(math.pi**2 * (1 + 1 / 4), rel=1e-3)


@pytest.mark.parametrize("length", [1.0, 2.0, 4.0])
def test_donsker_varadhan_scaling(length):
    e = rates.donsker_varadhan(DensityOnGrid.ground_state(Grid.box(0.0, length, 400)))
    assert e * length**2 == pytest.approx(math.pi**2, rel=5e-3)


def test_donsker_varadhan_infinite_without_boundary_decay():
    grid = Grid.box(0.0, 1.0, 100)
    assert rates.donsker_varadhan(DensityOnGrid.normalized(grid, np.ones(100))) == math.inf


# -- equal-marginal machinery ------------------------------------------------


@given(st.integers(0, 2**31), st.integers(2, 5))
def test_balance_is_a_kl_projection(seed, k):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.1, 1.0, size=(k, k))
    q = rates.balance(a)
    np.testing.assert_allclose(q.sum(), 1.0)
    np.testing.assert_allclose(q.sum(0), q.sum(1), atol=1e-11)
    # log(q / a) = u_i - u_j + const
    m = np.log(q / a)
    np.testing.assert_allclose(m - m[:, :1] - m[:1, :] + m[0, 0], 0.0, atol=1e-9)


def test_balance_reports_failure():
    with pytest.raises(ConvergenceError):
        rates.balance(np.random.default_rng(0).uniform(size=(4, 4)), maxiter=1)


@given(st.integers(0, 2**31), st.integers(2, 5))
def test_q_descent_reaches_perron_value(seed, k):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.2, 3.0, size=(k, k))
    q = rates.q_descent(np.log(a))
    log_rho, q_ref = rates.perron_pair_measure(a)
    assert rates._inner_objective(q, np.log(a)) == pytest.approx(-log_rho, abs=1e-10)
    np.testing.assert_allclose(q, q_ref, atol=1e-7)


def test_solve_pair_entropy_known_values():
    value, q = rates.solve_pair_entropy([0.5, 0.5], [[2.0, 1.0], [1.0, 2.0]])
    assert value == pytest.approx(-math.log(1.5), abs=1e-12)
    value, q = rates.solve_pair_entropy([0.3, 0.7], np.ones((2, 2)))
    assert value == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(q.entries, np.outer([0.3, 0.7], [0.3, 0.7]), atol=1e-10)


def naive_permanent(a):
    n = a.shape[0]
    return sum(math.prod(a[i, s[i]] for i in range(n)) for s in itertools.permutations(range(n)))


@given(st.integers(1, 7), st.integers(0, 2**31))
def test_permanent_matches_definition(n, seed):
    a = np.random.default_rng(seed).normal(size=(n, n))
    assert rates.permanent(a) == pytest.approx(naive_permanent(a), rel=1e-9, abs=1e-9)


def test_permanent_average_against_enumeration():
    m = np.array([0.25, 0.75])
    g = np.array([[2.0, 1.0], [1.0, 3.0]])
    n = 4
    ref = 0.0
    for atoms in itertools.product(range(2), repeat=n):
        weight = math.prod(m[a] for a in atoms)
        ref += weight * naive_permanent(g[np.ix_(atoms, atoms)]) / math.factorial(n)
    assert rates.permanent_average(m, g, n) == pytest.approx(ref, rel=1e-12)
    assert rates.permanent_average(m, np.ones((2, 2)), 6) == pytest.approx(1.0)


def test_permanent_average_guard():
    with pytest.raises(GuardError):
        rates.permanent_average([0.5, 0.5], np.ones((2, 2)), 11)


def test_permanent_limit_approached_monotonically():
    m, g = [0.5, 0.5], [[2.0, 1.0], [1.0, 2.0]]
    limit = math.log(1.5)
    gaps = [abs(math.log(rates.permanent_average(m, g, n)) / n - limit) for n in (4, 6, 8)]
    assert gaps[0] > gaps[1] > gaps[2] and gaps[2] < 0.1


# -- the pair objective ----------------------------------------------------


def test_mode_is_required():
    grid = Grid.box(0.0, 1.0, 10)
    with pytest.raises(ConfigError):
        rates.BridgeProblem(grid, 1.0, None)
    with pytest.raises(ConfigError):
        rates.BridgeProblem(grid, 1.0, "both")


def test_objective_normalized_free_potential_is_pair_entropy():
    rng = np.random.default_rng(0)
    grid = Grid.box(0.0, 1.0, 24)
    part = Partition.from_grid(grid, 6)
    q = random_prob(rng, (4, 4))
    p = DensityOnGrid.ground_state(grid)
    value = rates.objective_J(q, GridFunction.constant(grid), p, 0.7, mode="normalized", partition=part)
    masses = np.full(4, 6 / 25)  # node count times h
    assert value == pytest.approx(rates.pair_entropy(q, masses), abs=1e-12)


@pytest.mark.parametrize("beta", [0.05, 0.3, 1.0])
def test_objective_single_cell_matches_sine_series(beta):
    n = 200
    grid = Grid.box(0.0, 1.0, n)
    part = Partition.uniform(0.0, 1.0, 1)
    p = DensityOnGrid.ground_state(grid)
    value = rates.objective_J([[1.0]], GridFunction.constant(grid), p, beta, m=[1.0],
                              mode="canonical", partition=part)
    # node mean over n nodes carries ((n+1)/n)^2 relative to the integral
    expected = -(single_cell_log_mean(beta) + 2 * math.log((n + 1) / n))
    assert value == pytest.approx(expected, abs=2e-4)


@given(st.floats(-5, 5))
def test_canonical_objective_invariant_under_constant_shift(c):
    rng = np.random.default_rng(1)
    grid = Grid.box(0.0, 1.0, 16)
    part = Partition.from_grid(grid, 4)
    q = random_prob(rng, (4, 4))
    p = bumpy_density(grid)
    f = rng.normal(size=16)
    a = rates.objective_J(q, GridFunction(grid, f), p, 0.5, mode="canonical", partition=part, steps=16)
    b = rates.objective_J(q, GridFunction(grid, f + c), p, 0.5, mode="canonical", partition=part, steps=16)
    assert a == pytest.approx(b, abs=1e-9)


def test_spectral_and_powering_paths_agree():
    rng = np.random.default_rng(2)
    grid = Grid.box([0, 0], [1, 1], [6, 5])
    part = Partition.from_grid(grid, [3, 5])
    prob = rates.BridgeProblem(grid, 0.4, "normalized", part, steps=12)
    q = random_prob(rng, (2, 2))
    f = rng.normal(size=grid.size)
    p = DensityOnGrid.normalized(grid, rng.uniform(size=grid.size))
    direct = rates.objective_J(q, GridFunction(grid, f), p, 0.4, mode="normalized", partition=part, steps=12)
    assert prob.objective(q, f, p) == pytest.approx(direct, rel=1e-10)


def test_gradient_matches_finite_differences():
    from symbridge.acceptance import gradient_probes

    assert max(gradient_probes(probes=6)) < 1e-5


def test_tilted_occupation_is_a_density():
    grid = Grid.box(0.0, 1.0, 30)
    part = Partition.from_grid(grid, 10)
    q = random_prob(np.random.default_rng(3), (3, 3))
    rho = rates.tilted_occupation(q, np.zeros(30), 1.0, grid, partition=part, steps=32)
    assert rho.integral() == pytest.approx(1.0, rel=1e-10)
    assert np.all(rho.values >= -1e-12)


# -- solvers ---------------------------------------------------------------


def test_solve_J_q_dominates_every_potential():
    rng = np.random.default_rng(4)
    grid = Grid.box(0.0, 1.0, 20)
    part = Partition.from_grid(grid, 5)
    q = rates.balance(rng.uniform(0.2, 1.0, size=(4, 4)))
    p = bumpy_density(grid)
    res = rates.solve_J_q(q, p, 1.0, "canonical", partition=part, steps=32)
    assert res.state.gradient_norm < 1e-6
    for _ in range(5):
        f = GridFunction(grid, res.f.values + rng.normal(scale=0.5, size=20))
        assert rates.objective_J(q, f, p, 1.0, mode="canonical", partition=part, steps=32) \
            - rates.pair_entropy(q, rates.BridgeProblem(grid, 1.0, "canonical", part).masses) <= res.value + 1e-9


def test_solve_J_q_failure_is_explicit():
    grid = Grid.box(0.0, 1.0, 20)
    p = bumpy_density(grid)
    q = rates.jident_construct(p, 1.0).q_star
    with pytest.raises(ConvergenceError) as info:
        rates.solve_J_q(q, p, 1.0, "canonical", maxiter=1)
    assert info.value.history


def test_solve_J_sym_ground_state():
    grid = Grid.box(0.0, 1.0, 200)
    p = DensityOnGrid.ground_state(grid)
    res = rates.solve_J_sym(p, "lebesgue", 1.0, "canonical")
    assert res.value == pytest.approx(math.pi**2, rel=1e-6)
    qbar = res.state.q.first_marginal
    assert 0.5 * np.abs(qbar - p.values * grid.cell_volume).sum() < 1e-6
    assert res.state.marginal_gap < 1e-12


def test_solve_J_sym_matches_dirichlet_energy():
    grid = Grid.box(0.0, 1.0, 60)
    p = bumpy_density(grid)
    res = rates.solve_J_sym(p, "lebesgue", 1.0, "canonical")
    assert res.value == pytest.approx(rates.donsker_varadhan(p), rel=2e-3)


def test_solve_J_sym_nonnegative_in_normalized_mode():
    grid = Grid.box(0.0, 1.0, 40)
    res = rates.solve_J_sym(bumpy_density(grid), "lebesgue", 1.0, "normalized")
    assert res.value > 0


def test_jident_construct_ground_state():
    grid = Grid.box(0.0, 1.0, 200)
    out = rates.jident_construct(DensityOnGrid.ground_state(grid), 1.0)
    assert abs(out.eigenvalue) < 1e-8
    assert out.value == pytest.approx(math.pi**2, rel=1e-3)
    assert out.marginal_tv < 1e-8
    assert out.q_star.is_shift_invariant(1e-10)


def test_jident_construct_partial_support():
    grid = Grid.box(0.0, 1.0, 90)
    x = grid.points[:, 0]
    vals = np.where((x > 1 / 3) & (x < 2 / 3), np.sin(3 * np.pi * (x - 1 / 3)) ** 2, 0.0)
    out = rates.jident_construct(DensityOnGrid.normalized(grid, vals), 1.0)
    assert np.all(np.isfinite(out.f_star.values))


def test_beta_must_be_positive():
    with pytest.raises(DomainError):
        rates.BridgeProblem(Grid.box(0.0, 1.0, 5), 0.0, "canonical")
