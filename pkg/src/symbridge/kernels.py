"""Gaussian and Feynman-Kac kernels on a Dirichlet box.

The motion has generator ``Delta`` (variance ``2t`` per coordinate), so the
free transition density is ``(4 pi t)^(-d/2) exp(-|x-y|^2 / (4t))``.

A :class:`TransferOperator` discretises ``exp(tau (Delta + f))`` on the
interior nodes with a symmetric potential weighting,

    T(x, y) = exp(tau f(x) / 2) p^D_tau(x, y) exp(tau f(y) / 2) h^d,

where ``p^D_tau`` is the killed (Dirichlet) heat kernel of the box.  By
default ``p^D_tau`` is the method-of-images series, which is exact for a
box; ``boundary="truncate"`` instead restricts the free Gaussian to the
interior nodes and drops the mass that leaves in a single step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceError, DomainError
from .grid import Grid, GridFunction, values_of

BOUNDARIES = ("images", "truncate")

EIGEN_TOL = 1e-10
EIGEN_MAXITER = 10_000


def gaussian_kernel(x, y, beta: float, d: int | None = None):
    """Free heat kernel of ``Delta`` at time ``beta``.

    Parameters
    ----------
    x, y : array_like
        Points; the last axis is the coordinate axis.  Scalars are 1-D points.
    beta : float
        Time, must be positive.
    d : int, optional
        Dimension.  Inferred from the trailing axis of ``x`` when omitted.

    Returns
    -------
    float or ndarray
        ``(4 pi beta)^(-d/2) exp(-|x - y|^2 / (4 beta))``.
    """
    if not beta > 0:
        raise DomainError(f"beta must be positive, got {beta!r}")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    diff = x - y
    if d is None:
        d = 1 if diff.ndim == 0 else diff.shape[-1]
    sq = diff**2 if diff.ndim == 0 else np.sum(np.atleast_1d(diff) ** 2, axis=-1)
    out = (4.0 * np.pi * beta) ** (-d / 2.0) * np.exp(-sq / (4.0 * beta))
    return float(out) if np.ndim(out) == 0 else out


def dirichlet_heat_kernel_1d(x, y, t: float, length: float):
    """Heat kernel of ``d^2/dx^2`` on ``[0, length]`` killed at both ends.

    Method of images: an alternating sum of reflected Gaussians, cut off once
    the omitted images are below ``exp(-40)`` relative.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    s2 = 4.0 * t
    n_img = int(np.ceil((np.sqrt(160.0 * t) + length) / (2.0 * length))) + 1
    out = np.zeros(np.broadcast(x, y).shape)
    for k in range(-n_img, n_img + 1):
        shift = 2.0 * k * length
        out += np.exp(-((x - y + shift) ** 2) / s2) - np.exp(-((x + y + shift) ** 2) / s2)
    return out / np.sqrt(np.pi * s2)


def _axis_step(grid: Grid, a: int, tau: float, boundary: str) -> np.ndarray:
    u = grid.axis(a) - grid.lo[a]
    if boundary == "images":
        k = dirichlet_heat_kernel_1d(u[:, None], u[None, :], tau, grid.lengths[a])
    else:
        k = np.exp(-((u[:, None] - u[None, :]) ** 2) / (4.0 * tau)) / np.sqrt(4.0 * np.pi * tau)
    return np.clip(k, 0.0, None) * grid.h[a]


def step_matrix(grid: Grid, tau: float, boundary: str = "images") -> np.ndarray:
    """The ``f = 0`` transfer kernel ``p^D_tau(x_i, x_j) h^d`` on the nodes."""
    if not tau > 0:
        raise DomainError(f"tau must be positive, got {tau!r}")
    if boundary not in BOUNDARIES:
        raise DomainError(f"boundary must be one of {BOUNDARIES}, got {boundary!r}")
    out = _axis_step(grid, 0, tau, boundary)
    for a in range(1, grid.dim):
        out = np.kron(out, _axis_step(grid, a, tau, boundary))
    return out


@dataclass(frozen=True)
class TransferOperator:
    """Dense one-step Feynman-Kac kernel, including the quadrature weight."""

    grid: Grid
    tau: float
    kernel: np.ndarray = field(repr=False)
    boundary: str = "images"

    @cached_property
    def eigh(self) -> tuple[np.ndarray, np.ndarray]:
        """Eigenvalues (ascending) and orthonormal eigenvectors of the kernel."""
        return np.linalg.eigh(self.kernel)

    def principal(self) -> tuple[float, np.ndarray]:
        """Rate ``log(mu_1)/tau`` and the positive, ``h^d``-normalised eigenvector."""
        w, v = self.eigh
        vec = v[:, -1]
        vec = np.abs(vec) if vec.sum() >= 0 else np.abs(-vec)
        return float(np.log(w[-1]) / self.tau), vec / np.sqrt(self.grid.cell_volume)


def build_transfer(grid: Grid, f, tau: float, boundary: str = "images") -> TransferOperator:
    """Discretise ``exp(tau (Delta + f))`` with symmetric potential weighting.

    Parameters
    ----------
    grid : Grid
    f : GridFunction, float or array_like
        Potential on the interior nodes.
    tau : float
        Time step.
    boundary : {"images", "truncate"}
        Realisation of the killing at the box walls.
    """
    fv = values_of(f, grid)
    if not np.all(np.isfinite(fv)):
        raise DomainError("potential must be finite on interior nodes")
    half = np.exp(0.5 * tau * fv)
    kernel = half[:, None] * step_matrix(grid, tau, boundary) * half[None, :]
    return TransferOperator(grid, float(tau), kernel, boundary)


def matrix_power_log(a: np.ndarray, power: int) -> tuple[np.ndarray, float]:
    """``a**power`` as ``(scaled, log_scale)`` with ``a**power = scaled * exp(log_scale)``.

    Binary powering; each product is divided by its largest entry so that
    nothing over- or underflows.
    """
    if power < 1:
        raise DomainError("power must be at least 1")
    base = np.array(a, dtype=float)
    base_log = 0.0
    result = None
    result_log = 0.0
    while True:
        if power & 1:
            if result is None:
                result, result_log = base.copy(), base_log
            else:
                result = result @ base
                result_log += base_log
                s = np.abs(result).max()
                if s > 0:
                    result /= s
                    result_log += math.log(s)
        power >>= 1
        if not power:
            break
        base = base @ base
        base_log *= 2.0
        s = np.abs(base).max()
        if s > 0:
            base /= s
            base_log += math.log(s)
    return result, result_log


def fk_bridge_log(grid: Grid, f, beta: float, steps: int, boundary: str = "images"):
    """Scaled Feynman-Kac bridge density and its log normaliser.

    Returns ``(scaled, log_scale)`` with
    ``k_beta^f = scaled * exp(log_scale)``.
    """
    if steps < 1:
        raise DomainError("steps must be at least 1")
    if not beta > 0:
        raise DomainError(f"beta must be positive, got {beta!r}")
    op = build_transfer(grid, f, beta / steps, boundary)
    scaled, log_scale = matrix_power_log(op.kernel, int(steps))
    return scaled, log_scale - math.log(grid.cell_volume)


def fk_bridge_matrix(grid: Grid, f, beta: float, steps: int, boundary: str = "images") -> np.ndarray:
    """Discrete density ``k_beta^f(x, y)`` of the killed Feynman-Kac kernel.

    Equal to ``T**steps / h^d`` for ``T = build_transfer(grid, f, beta/steps)``.
    """
    scaled, log_scale = fk_bridge_log(grid, f, beta, steps, boundary)
    return scaled * math.exp(log_scale)


def laplacian(grid: Grid) -> sp.csr_matrix:
    """Second-order finite-difference Dirichlet Laplacian as a sparse matrix."""
    out = None
    for a in range(grid.dim):
        n = grid.n[a]
        d2 = sp.diags([np.ones(n - 1), -2.0 * np.ones(n), np.ones(n - 1)], [-1, 0, 1]) / grid.h[a] ** 2
        term = sp.kron(sp.kron(sp.identity(int(np.prod(grid.n[:a]))), d2), sp.identity(int(np.prod(grid.n[a + 1:]))))
        out = term if out is None else out + term
    return sp.csr_matrix(out)


def apply_laplacian(grid: Grid, values) -> np.ndarray:
    return laplacian(grid) @ np.asarray(values, dtype=float)


def principal_eigen(grid: Grid, f, tol: float = EIGEN_TOL, maxiter: int = EIGEN_MAXITER):
    """Largest eigenvalue of the finite-difference ``Delta + f`` with Dirichlet walls.

    Shifted inverse power iteration with shift ``max f + 1``, which lies
    strictly above the spectrum.

    Returns
    -------
    lam : float
        Principal eigenvalue (Rayleigh quotient of the converged vector).
    phi : GridFunction
        Positive eigenvector with ``sum(phi**2) h^d = 1``.

    Raises
    ------
    ConvergenceError
        When the eigenvector change has not dropped below ``tol`` after
        ``maxiter`` iterations.  The change history is attached.
    """
    fv = values_of(f, grid)
    if not np.all(np.isfinite(fv)):
        raise DomainError("potential must be finite on interior nodes")
    op = laplacian(grid) + sp.diags(fv)
    shift = fv.max() + 1.0
    solve = spla.splu(sp.csc_matrix(shift * sp.identity(grid.size) - op)).solve
    v = np.ones(grid.size) / np.sqrt(grid.size)
    history = []
    for _ in range(maxiter):
        w = solve(v)
        w /= np.linalg.norm(w)
        if w.sum() < 0:
            w = -w
        change = float(np.abs(w - v).max())
        history.append(change)
        v = w
        if change < tol:
            break
    else:
        raise ConvergenceError(
            f"inverse iteration did not reach {tol:g} in {maxiter} iterations", history
        )
    lam = float(v @ (op @ v))
    phi = np.abs(v) / np.sqrt(grid.cell_volume)
    return lam, GridFunction(grid, phi)


def transfer_eigen(grid: Grid, f, tau: float, boundary: str = "images"):
    """Principal rate and eigenvector of the one-step transfer kernel.

    The rate ``log(mu_1)/tau`` converges to the principal eigenvalue of
    ``Delta + f`` as the grid and step are refined.
    """
    lam, vec = build_transfer(grid, f, tau, boundary).principal()
    return lam, GridFunction(grid, vec)


def girsanov_mass(
    grid: Grid,
    f,
    beta: float,
    x,
    steps: int = 64,
    boundary: str = "images",
    lam_offset: float = 0.0,
) -> float:
    """Total mass of the ground-state transform started at ``x``.

    Computes ``sum_y k_beta^f(x, y) exp(-beta lam) phi(y) / phi(x) h^d`` with
    ``(lam, phi)`` the principal pair of the transfer kernel that also builds
    ``k_beta^f``, so the result is one up to rounding.  ``lam_offset`` is
    added to ``lam`` (a nonzero value gives ``exp(-beta lam_offset)``).

    Parameters
    ----------
    x : array_like
        A point strictly inside the box; the node whose cell contains it is used.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    lo, hi = np.asarray(grid.lo), np.asarray(grid.hi)
    if x.shape != (grid.dim,) or np.any(x <= lo) or np.any(x >= hi):
        raise DomainError(f"x={x.tolist()} is not an interior point of the box")
    i = int(grid.node_index(x)[0])
    op = build_transfer(grid, f, beta / steps, boundary)
    lam, phi = op.principal()
    scaled, log_scale = matrix_power_log(op.kernel, int(steps))
    # the h^d of the sum cancels the 1/h^d of k_beta^f
    row = scaled[i] @ phi
    return float(np.exp(log_scale - beta * (lam + lam_offset)) * row / phi[i])
