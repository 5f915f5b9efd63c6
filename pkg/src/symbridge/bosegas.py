"""Canonical ideal Bose gas in a box trap.

All traces are computed relative to the ground-state energy: with
``z1(t) = sum_k exp(-t (E_k - E_1))`` the shifted partition functions
``z_N = Z_N exp(N beta E_1)`` obey

    z_N = (1/N) sum_{k=1}^N z1(k beta) z_{N-k},   z_0 = 1,

grouping permutations by the cycle that contains particle 1.  Since every
``z1 >= 1`` one has ``z_N >= 1``, so ``(1/N) log Z_N + beta E_1 >= 0``.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .combinatorics import cycle_types
from .errors import ConfigError, DomainError, GuardError, PreconditionError
from .grid import Grid, GridFunction, values_of
from .kernels import laplacian, principal_eigen

TAIL_RTOL = 1e-16
BRUTE_MAX_N = 6
BRUTE_MAX_LEVELS = 40
DENSE_LIMIT = 3000


@dataclass(frozen=True)
class Spectrum:
    """Ascending single-particle energies, truncated to ``len(energies)`` levels."""

    energies: np.ndarray
    source: str = "analytic"
    grid: Grid | None = field(default=None, repr=False, compare=False)
    potential: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        e = np.asarray(self.energies, dtype=float).ravel()
        if e.size == 0 or not np.isfinite(e[0]):
            raise DomainError("spectrum needs a finite ground-state energy")
        if np.any(np.diff(e) < 0):
            raise DomainError("energies must be sorted ascending")
        object.__setattr__(self, "energies", e)

    @property
    def ground(self) -> float:
        return float(self.energies[0])

    def __len__(self) -> int:
        return self.energies.size

    def log_z1(self, t) -> np.ndarray:
        """``log sum_k exp(-t E_k)`` for each time in ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return -t * self.ground + np.log(self.shifted_z1(t))

    def shifted_z1(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.exp(-np.outer(t, self.energies - self.ground)).sum(axis=1)

    def excited_z1(self, t) -> np.ndarray:
        """``z1(t) - 1`` summed over the excited levels only (no cancellation)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.exp(-np.outer(t, self.energies[1:] - self.ground)).sum(axis=1)


def analytic_spectrum(lo, hi, k: int | None = None, beta: float | None = None) -> Spectrum:
    """Dirichlet Laplacian on a box: ``E = pi^2 sum_a (j_a / L_a)^2``, ``j_a >= 1``.

    Either ``k`` levels are returned, or, given ``beta``, every level with
    ``exp(-beta (E - E_1)) >= 1e-16``.
    """
    lengths = np.atleast_1d(np.asarray(hi, dtype=float) - np.asarray(lo, dtype=float))
    if np.any(lengths <= 0):
        raise ConfigError("box must satisfy lo < hi")
    if k is None and beta is None:
        raise ConfigError("give a level count k or an inverse temperature beta")
    e1 = float(np.pi**2 * np.sum(1.0 / lengths**2))
    if k is None:
        cutoff = e1 - math.log(TAIL_RTOL) / beta
    else:
        cutoff = None
    # per-axis index bound large enough for either request
    if cutoff is not None:
        jmax = [int(math.sqrt(cutoff) * L / math.pi) + 3 for L in lengths]
    else:
        jmax = [k + 1 for _ in lengths]
    axes = [np.pi**2 * (np.arange(1, j + 1) / L) ** 2 for j, L in zip(jmax, lengths)]
    levels = axes[0]
    for extra in axes[1:]:
        levels = (levels[:, None] + extra[None, :]).ravel()
        if cutoff is None and levels.size > 4 * k * k:
            levels = np.sort(levels)[: 4 * k * k]
    levels = np.sort(levels)
    if cutoff is not None:
        # keep the first level past the cutoff so the tail test passes
        levels = levels[: int(np.searchsorted(levels, cutoff, side="right")) + 1]
    else:
        levels = levels[:k]
    return Spectrum(levels, "analytic")


def spectrum(grid: Grid, W, k: int | None = None) -> Spectrum:
    """Lowest ``k`` eigenvalues of the finite-difference ``-Delta + W`` (Dirichlet).

    ``k=None`` returns the whole spectrum.  Requests beyond the number of
    interior nodes are clipped with a warning.
    """
    wv = values_of(W, grid)
    if not np.all(np.isfinite(wv)):
        raise DomainError("W must be finite on interior nodes")
    size = grid.size
    if k is None:
        k = size
    if k > size:
        warnings.warn(f"requested {k} levels but the grid has {size}; clipping", stacklevel=2)
        k = size
    if k < 1:
        raise DomainError("k must be at least 1")
    if grid.dim == 1:
        h2 = grid.h[0] ** 2
        diag = 2.0 / h2 + wv
        off = np.full(size - 1, -1.0 / h2)
        energies = sla.eigh_tridiagonal(diag, off, eigvals_only=True,
                                        select="i", select_range=(0, k - 1))
    else:
        op = -laplacian(grid) + np.diag(wv) if size <= DENSE_LIMIT else None
        if op is not None:
            energies = sla.eigh(op, eigvals_only=True, subset_by_index=(0, k - 1))
        else:
            import scipy.sparse as sp

            sparse_op = -laplacian(grid) + sp.diags(wv)
            energies = np.sort(spla.eigsh(sparse_op, k=k, sigma=wv.min() - 1.0,
                                          return_eigenvectors=False))
    return Spectrum(np.sort(energies), "finite-difference", grid, wv)


@dataclass(frozen=True)
class PartitionTable:
    """``log Z_0 .. log Z_N`` at one inverse temperature.

    Stored as the shifted values ``log z_N = log Z_N + N beta E_1`` so that
    small deviations from ground-state dominance keep their precision.
    """

    beta: float
    log_z_shifted: np.ndarray = field(repr=False)
    ground: float = 0.0

    @property
    def n_max(self) -> int:
        return self.log_z_shifted.size - 1

    @property
    def log_z(self) -> np.ndarray:
        return self.log_z_shifted - np.arange(self.n_max + 1) * self.beta * self.ground

    def shifted(self) -> np.ndarray:
        return self.log_z_shifted


def _check_truncation(spec: Spectrum, beta: float) -> None:
    gap = spec.energies[-1] - spec.ground
    if len(spec) > 1 and math.exp(-beta * gap) >= TAIL_RTOL:
        need = spec.ground - math.log(TAIL_RTOL) / beta
        raise PreconditionError(
            f"spectrum truncated too early: exp(-beta(E_K - E_1)) = {math.exp(-beta * gap):.3g}; "
            f"need levels up to E >= {need:.6g} (more than K={len(spec)} levels)")


def partition_recursion(spec: Spectrum, beta: float, n_max: int) -> PartitionTable:
    """Canonical partition functions ``Z_0 .. Z_{n_max}`` by the cycle recursion.

    While ``z1(beta)^N`` stays representable the recursion runs on
    ``e_N = z_N - 1`` with the excited-level sums ``z1 - 1``, which keeps full
    relative precision when the ground state dominates; otherwise it runs
    in log space.
    """
    if n_max < 1:
        raise DomainError("n_max must be at least 1")
    if not beta > 0:
        raise DomainError("beta must be positive")
    _check_truncation(spec, beta)
    ks = np.arange(1, n_max + 1)
    excited = spec.excited_z1(ks * beta)
    log_shifted = np.zeros(n_max + 1)
    if n_max * math.log1p(excited[0]) < 600:
        e = np.zeros(n_max + 1)
        for n in range(1, n_max + 1):
            eps = excited[:n]
            tail = e[n - 1::-1][:n]
            e[n] = (eps.sum() + tail.sum() + eps @ tail) / n
        log_shifted = np.log1p(e)
    else:
        log_z1 = np.log1p(excited)
        for n in range(1, n_max + 1):
            terms = log_z1[:n] + log_shifted[n - 1::-1][:n]
            top = terms.max()
            log_shifted[n] = top + math.log(np.exp(terms - top).sum()) - math.log(n)
    return PartitionTable(float(beta), log_shifted, spec.ground)


def brute_force_trace(spec: Spectrum, beta: float, n: int) -> float:
    """``Z_n`` by summing ``exp(-beta sum E_{k_i})`` over multisets of ``n`` levels.

    Limited to ``n <= 6`` and at most 40 levels.
    """
    if n > BRUTE_MAX_N or len(spec) > BRUTE_MAX_LEVELS:
        raise GuardError(
            f"brute-force traces are limited to n <= {BRUTE_MAX_N} and at most "
            f"{BRUTE_MAX_LEVELS} levels; got n={n}, levels={len(spec)}")
    if n < 0:
        raise DomainError("n must be nonnegative")
    if n == 0:
        return 1.0
    e = spec.energies
    total = 0.0
    combos = itertools.combinations_with_replacement(range(len(e)), n)
    while True:
        block = np.array(list(itertools.islice(combos, 200_000)), dtype=np.int64)
        if block.size == 0:
            break
        total += float(np.exp(-beta * e[block].sum(axis=1)).sum())
    return total


def cycle_type_sum(spec: Spectrum, beta: float, n: int) -> float:
    """``Z_n = sum over cycle types prod_k z1(k beta)^{f_k} / (k^{f_k} f_k!)``."""
    if n < 0:
        raise DomainError("n must be nonnegative")
    if n == 0:
        return 1.0
    z1 = np.exp(spec.log_z1(np.arange(1, n + 1) * beta))
    total = 0.0
    for ct in cycle_types(n):
        term = 1.0
        for k, f in enumerate(ct.counts, start=1):
            if f:
                term *= z1[k - 1] ** f / (k**f * math.factorial(f))
        total += term
    return total


@dataclass
class LdpReport:
    """Convergence of ``a_N = (1/N) log Z_N`` to ``-beta E_1``."""

    n: np.ndarray
    a_n: np.ndarray
    target: float
    deviation: np.ndarray
    slope: float
    beta: float
    alternative_target: float | None = None
    truncation_levels: int = 0

    @property
    def final_deviation(self) -> float:
        return float(self.deviation[-1])

    def decreasing_from(self, n0: int) -> bool:
        d = self.deviation[self.n >= n0]
        return bool(np.all(np.diff(d) <= 0))

    def rows(self):
        for n, a, d, lz in zip(self.n, self.a_n, self.deviation, self.n * self.a_n):
            yield int(n), float(lz), float(a), self.target, float(d)

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "target": self.target,
            "alternative_target": self.alternative_target,
            "final_deviation": self.final_deviation,
            "slope": self.slope,
            "truncation_levels": self.truncation_levels,
            "n": self.n.tolist(),
            "a_n": self.a_n.tolist(),
            "deviation": self.deviation.tolist(),
        }


def ldp_check(table: PartitionTable, spec: Spectrum, beta: float) -> LdpReport:
    """Compare ``(1/N) log Z_N`` with ``-beta E_1``.

    The deviation ``a_N + beta E_1 = (1/N) log z_N`` is nonnegative.  The
    slope of the deviation against ``log(N)/N`` is fitted by least squares.
    When the spectrum carries its grid and potential ``W``, the report also
    gives ``beta lambda(W)`` with ``lambda(W)`` the principal eigenvalue of
    ``Delta + W``, which agrees with the target only for ``W = 0``.
    """
    if table.n_max < 32:
        raise PreconditionError("ldp_check needs a table with at least 32 entries")
    if abs(table.beta - beta) > 1e-12 * max(1.0, abs(beta)):
        raise ConfigError("table was computed at a different beta")
    n = np.arange(1, table.n_max + 1)
    shifted = table.shifted()[1:]
    a_n = table.log_z[1:] / n
    target = -beta * spec.ground
    deviation = shifted / n
    x = np.log(n) / n
    xc = x - x.mean()
    slope = float(xc @ (deviation - deviation.mean()) / (xc @ xc))
    alt = None
    if spec.grid is not None and spec.potential is not None:
        lam, _ = principal_eigen(spec.grid, spec.potential)
        alt = beta * lam
    elif spec.source == "analytic":
        alt = target
    return LdpReport(n, a_n, target, deviation, slope, float(beta), alt, len(spec))


def quadratic_potential(grid: Grid, strength: float, center=None) -> GridFunction:
    """``strength * |x - center|^2``, centred in the box by default."""
    c = 0.5 * (np.asarray(grid.lo) + np.asarray(grid.hi)) if center is None else np.asarray(center)
    return GridFunction(grid, strength * np.sum((grid.points - c) ** 2, axis=1))
