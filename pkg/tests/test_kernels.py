import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import linalg, stats

from symbridge import kernels
from symbridge.errors import ConvergenceError, DomainError
from symbridge.grid import Grid


def sine_series_kernel(x, y, t, length, terms=400):
    """Eigenfunction expansion of the killed heat kernel on [0, length]."""
    k = np.arange(1, terms + 1)
    modes_x = np.sin(np.outer(np.atleast_1d(x), k) * np.pi / length)
    modes_y = np.sin(np.outer(np.atleast_1d(y), k) * np.pi / length)
    decay = np.exp(-t * (k * np.pi / length) ** 2)
    return (2.0 / length) * (modes_x * decay) @ modes_y.T


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.05, 4.0))
def test_gaussian_kernel_matches_normal_pdf(x, y, beta):
    # generator Delta: variance 2 beta
    ref = stats.norm.pdf(x, loc=y, scale=math.sqrt(2 * beta))
    assert kernels.gaussian_kernel(x, y, beta) == pytest.approx(ref, rel=1e-12)


def test_gaussian_kernel_product_form():
    x, y = np.array([0.1, -0.4, 1.0]), np.array([0.3, 0.2, 0.0])
    ref = np.prod([kernels.gaussian_kernel(a, b, 0.7) for a, b in zip(x, y)])
    assert kernels.gaussian_kernel(x, y, 0.7) == pytest.approx(ref, rel=1e-13)


def test_gaussian_kernel_rejects_nonpositive_time():
    with pytest.raises(DomainError):
        kernels.gaussian_kernel(0.0, 0.0, 0.0)


@pytest.mark.parametrize("t", [0.001, 0.05, 0.5, 2.0])
def test_dirichlet_images_match_sine_series(t):
    x = np.linspace(0.05, 0.95, 7)
    y = np.linspace(0.1, 0.9, 5)
    got = kernels.dirichlet_heat_kernel_1d(x[:, None], y[None, :], t, 1.0)
    np.testing.assert_allclose(got, sine_series_kernel(x, y, t, 1.0), atol=1e-10)


def test_fk_bridge_free_case_against_eigenseries():
    grid = Grid.box(0.0, 1.0, 399)
    x = grid.points[:, 0]
    k = kernels.fk_bridge_matrix(grid, 0.0, 0.1, 64)
    i = grid.node_index([[0.5]])[0]
    ref = sine_series_kernel(x[i], x, 0.1, 1.0)[0]
    np.testing.assert_allclose(k[i], ref, atol=1e-10)


def test_fk_bridge_constant_potential_scales():
    grid = Grid.box(0.0, 2.0, 60)
    k0 = kernels.fk_bridge_matrix(grid, 0.0, 0.8, 16)
    k3 = kernels.fk_bridge_matrix(grid, 3.0, 0.8, 16)
    np.testing.assert_allclose(k3, math.exp(0.8 * 3.0) * k0, rtol=1e-12)


def test_fk_bridge_symmetric_and_positive():
    grid = Grid.box([0, 0], [1, 1], [8, 9])
    f = np.sin(grid.points.sum(axis=1))
    k = kernels.fk_bridge_matrix(grid, f, 0.4, 8)
    np.testing.assert_allclose(k, k.T, rtol=1e-12, atol=1e-300)
    assert np.all(k > 0)


def test_strang_splitting_is_second_order():
    grid = Grid.box(0.0, 1.0, 80)
    f = 5.0 * np.cos(2 * np.pi * grid.points[:, 0])
    ks = [kernels.fk_bridge_matrix(grid, f, 0.5, m) for m in (8, 16, 32)]
    d1 = np.abs(ks[1] - ks[0]).max()
    d2 = np.abs(ks[2] - ks[1]).max()
    assert d1 / d2 > 3.0


@given(st.integers(1, 40), st.integers(0, 2**31))
def test_matrix_power_log_matches_direct_power(power, seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.1, 1.0, size=(5, 5))
    scaled, log_scale = kernels.matrix_power_log(a, power)
    ref = np.linalg.matrix_power(a, power)
    np.testing.assert_allclose(scaled * math.exp(log_scale), ref, rtol=1e-11)


def test_matrix_power_log_avoids_underflow():
    a = np.full((3, 3), 1e-30)
    scaled, log_scale = kernels.matrix_power_log(a, 1000)
    assert np.all(np.isfinite(scaled)) and scaled.max() == pytest.approx(1.0)
    # a^p = 3^(p-1) 1e-30p for the all-equal matrix
    assert log_scale == pytest.approx(999 * math.log(3) + 1000 * math.log(1e-30), rel=1e-12)


@pytest.mark.parametrize("n", [20, 101])
def test_principal_eigen_free_case_exact_discrete(n):
    grid = Grid.box(0.0, 1.0, n)
    h = grid.h[0]
    lam, phi = kernels.principal_eigen(grid, 0.0)
    assert lam == pytest.approx(-4.0 / h**2 * math.sin(math.pi * h / 2) ** 2, rel=1e-10)
    assert np.sum(phi.values**2) * grid.cell_volume == pytest.approx(1.0)
    assert np.all(phi.values > 0)


def test_principal_eigen_against_dense_solver():
    grid = Grid.box([0, 0], [1, 2], [12, 15])
    f = 10.0 * np.exp(-np.sum((grid.points - [0.3, 1.2]) ** 2, axis=1))
    lam, _ = kernels.principal_eigen(grid, f)
    dense = kernels.laplacian(grid).toarray() + np.diag(f)
    assert lam == pytest.approx(linalg.eigh(dense, eigvals_only=True)[-1], abs=1e-9)


def test_principal_eigen_raises_with_history():
    grid = Grid.box(0.0, 1.0, 30)
    with pytest.raises(ConvergenceError) as info:
        kernels.principal_eigen(grid, 0.0, maxiter=2)
    assert len(info.value.history) == 2


def test_transfer_rate_approaches_fd_eigenvalue():
    grid = Grid.box(0.0, 1.0, 200)
    lam, _ = kernels.transfer_eigen(grid, 0.0, grid.h[0] ** 2)
    assert lam == pytest.approx(-math.pi**2, rel=1e-3)


@given(st.floats(0.1, 2.0), st.floats(0.05, 0.95), st.integers(0, 2**31))
def test_girsanov_mass_is_one(beta, x, seed):
    rng = np.random.default_rng(seed)
    grid = Grid.box(0.0, 1.0, 40)
    f = rng.normal(scale=3.0, size=grid.size)
    assert kernels.girsanov_mass(grid, f, beta, [x], steps=16) == pytest.approx(1.0, abs=1e-10)


def test_girsanov_wrong_eigenvalue_is_detected():
    grid = Grid.box(0.0, 1.0, 60)
    mass = kernels.girsanov_mass(grid, 0.0, 1.0, [0.5], lam_offset=0.1)
    assert mass == pytest.approx(math.exp(-0.1), rel=1e-10)


@pytest.mark.parametrize("x", [0.0, 1.0, -0.2])
def test_girsanov_rejects_non_interior_points(x):
    with pytest.raises(DomainError):
        kernels.girsanov_mass(Grid.box(0.0, 1.0, 10), 0.0, 1.0, [x])


def test_step_matrix_rejects_unknown_boundary():
    with pytest.raises(DomainError):
        kernels.step_matrix(Grid.box(0.0, 1.0, 5), 0.1, boundary="periodic")
