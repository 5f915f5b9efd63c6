"""Rate functions of the symmetrised bridge ensemble and their solvers.

Everything lives on a :class:`~symbridge.grid.Grid` and a box
:class:`~symbridge.grid.Partition` of it (by default one cell per node).  For
a potential ``f`` the Feynman-Kac kernel ``k_beta^f`` is the ``steps``-th
power of the transfer operator, and its cell average is

    K_f(r, s) = mean over nodes x in U_r, y in U_s of k_beta^f(x, y).

In canonical mode ``K_f`` is used as is; in normalized mode it is divided by
``K_0``, the same average for ``f = 0``, so that ``E[exp(0)] = 1``.

The pair objective is

    H(q | qbar x m) + beta <f, p> - <q, log K_f> - <q, log g>,

with ``m`` the cell masses.  For fixed ``f`` the infimum over shift-invariant
``q`` equals ``-log rho(A_f)`` where ``A_f(r, s) = m(s) K_f(r, s) g(r, s)`` and
``rho`` is the Perron root; the minimiser is the Doob pair measure of ``A_f``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

import numpy as np
from scipy import ndimage
from scipy.optimize import minimize
from scipy.special import gammaln, logsumexp, xlogy

from .combinatorics import PairMeasure
from .errors import ConfigError, ConvergenceError, DomainError, GuardError
from .grid import DensityOnGrid, Grid, GridFunction, Partition, values_of
from .kernels import apply_laplacian, principal_eigen, step_matrix

BALANCE_TOL = 1e-12
BALANCE_MAXITER = 10_000
SUPPORT_RTOL = 1e-12
OSCILLATION_WINDOW = 50


class BridgeMode(str, Enum):
    """Which bridge expectation enters the log term."""

    NORMALIZED = "normalized"
    CANONICAL = "canonical"


def _mode(mode) -> BridgeMode:
    if mode is None:
        raise ConfigError("mode is required: 'normalized' or 'canonical'")
    try:
        return BridgeMode(mode)
    except ValueError:
        raise ConfigError(f"mode must be 'normalized' or 'canonical', got {mode!r}") from None


def default_steps(grid: Grid, beta: float) -> int:
    """Time steps with ``tau <= h^2``, where Gaussian quadrature on the grid is exact."""
    return max(64, int(math.ceil(beta / float(np.min(grid.h)) ** 2)))


# ---------------------------------------------------------------------------
# entropies


def _entries(q) -> np.ndarray:
    return q.entries if isinstance(q, PairMeasure) else np.asarray(q, dtype=float)


def relative_entropy(q, reference) -> float:
    """``sum q log(q / reference)`` with ``0 log 0 = 0``; ``inf`` off absolute continuity."""
    a = _entries(q)
    b = _entries(reference)
    if a.shape != b.shape:
        raise ConfigError("q and reference live on different index sets")
    charged = a > 0
    if np.any(charged & (b <= 0)):
        return math.inf
    return float(np.sum(xlogy(a[charged], a[charged]) - a[charged] * np.log(b[charged])))


def pair_entropy(q, m) -> float:
    """``H(q | qbar x m)`` with ``qbar`` the first marginal of ``q``."""
    a = _entries(q)
    qbar = a.sum(axis=1)
    return relative_entropy(a, np.outer(qbar, np.asarray(m, dtype=float)))


def donsker_varadhan(p: DensityOnGrid, boundary_tol: float = 0.05) -> float:
    """Dirichlet energy ``||grad sqrt(p)||^2`` of a density on the grid.

    Forward differences along each axis, with ``sqrt(p) = 0`` beyond the
    walls.  Returns ``inf`` when the density on the outermost interior layer
    exceeds ``boundary_tol`` times its maximum, the discrete sign that
    ``sqrt(p)`` does not vanish at the boundary.
    """
    grid = p.grid
    vals = values_of(p, grid)
    if np.any(vals < 0):
        raise DomainError("density must be nonnegative")
    top = vals.max()
    if top > 0 and vals[grid.boundary_layer()].max() > boundary_tol * top:
        return math.inf
    phi = np.sqrt(vals).reshape(grid.shape)
    energy = 0.0
    for a in range(grid.dim):
        padded = np.pad(phi, [(1, 1) if b == a else (0, 0) for b in range(grid.dim)])
        energy += np.sum((np.diff(padded, axis=a) / grid.h[a]) ** 2)
    return float(energy * grid.cell_volume)


# ---------------------------------------------------------------------------
# shift-invariant projection and the q-step


def balance(a: np.ndarray, tol: float = BALANCE_TOL, maxiter: int = BALANCE_MAXITER) -> np.ndarray:
    """KL projection of a positive matrix onto equal-marginal probability matrices.

    The projection has the form ``a_ij exp(u_i - u_j) / Z``; ``u`` is updated
    by half the log ratio of column to row sums until the marginal gap is
    below ``tol``.
    """
    a = np.asarray(a, dtype=float)
    u = np.zeros(a.shape[0])
    history = []
    for _ in range(maxiter):
        q = a * np.exp(u[:, None] - u[None, :])
        total = q.sum()
        row = q.sum(axis=1)
        col = q.sum(axis=0)
        gap = float(np.abs(row - col).max() / total)
        history.append(gap)
        if gap < tol:
            return q / total
        live = (row > 0) & (col > 0)
        u[live] += 0.5 * (np.log(col[live]) - np.log(row[live]))
    raise ConvergenceError(f"marginal balancing did not reach {tol:g} in {maxiter} sweeps", history)


def _inner_objective(q: np.ndarray, log_a: np.ndarray) -> float:
    # sum q log(q / (qbar_r A_rs))
    qbar = q.sum(axis=1)
    pos = q > 0
    return float(np.sum(xlogy(q, q)[pos] - q[pos] * (np.log(qbar)[:, None] + log_a)[pos]))


def q_descent(
    log_a: np.ndarray,
    q0: np.ndarray | None = None,
    tol: float = 1e-13,
    maxiter: int = 5_000,
    history: list | None = None,
) -> np.ndarray:
    """Minimise ``sum q log(q / (qbar A))`` over equal-marginal ``q``.

    Entropic mirror steps ``q <- balance(q^(1-eta) (qbar A)^eta)`` with
    ``eta`` starting at 1 and halved until the objective does not increase.

    Raises
    ------
    ConvergenceError
        When the objective rises over a window of 50 steps or ``maxiter``
        is reached; the objective history is attached.
    """
    k = log_a.shape[0]
    q = np.full((k, k), 1.0 / k**2) if q0 is None else np.asarray(q0, dtype=float)
    q = balance(q)
    track: list[float] = []
    current = _inner_objective(q, log_a)
    for _ in range(maxiter):
        lq = np.log(np.maximum(q, 1e-300))
        target = np.log(q.sum(axis=1))[:, None] + log_a
        eta = 1.0
        while True:
            logits = (1.0 - eta) * lq + eta * target
            cand = balance(np.exp(logits - logits.max()))
            value = _inner_objective(cand, log_a)
            if value <= current + 1e-14 * max(1.0, abs(current)) or eta < 1e-6:
                break
            eta *= 0.5
        change = float(np.abs(cand - q).max())
        q, current = cand, value
        track.append(current)
        if history is not None:
            history.append(current)
        if len(track) > OSCILLATION_WINDOW and track[-1] > track[-1 - OSCILLATION_WINDOW] + 1e-12:
            raise ConvergenceError("q-descent objective increased over 50 steps", track)
        if change < tol:
            return q
    raise ConvergenceError(f"q-descent did not converge in {maxiter} steps", track)


def perron_pair_measure(a: np.ndarray) -> tuple[float, np.ndarray]:
    """``log rho(a)`` and the pair measure ``l_i a_ij r_j / (rho l.r)`` of a positive matrix."""
    w, vl, vr = _eig_lr(a)
    q = vl[:, None] * a * vr[None, :]
    return float(np.log(w)), q / q.sum()


def _eig_lr(a):
    from scipy.linalg import eig

    w, vl, vr = eig(a, left=True, right=True)
    i = int(np.argmax(w.real))
    return w[i].real, np.abs(vl[:, i].real), np.abs(vr[:, i].real)


# ---------------------------------------------------------------------------
# Feynman-Kac cell kernels


def _gamma(log_mu: np.ndarray, steps: int) -> np.ndarray:
    """``sum_m w_m mu_a^m mu_b^(steps-m)`` with trapezoid weights, for ``mu <= 1``."""
    u = log_mu[:, None]
    v = log_mu[None, :]
    hi = np.maximum(u, v)
    lo = np.minimum(u, v)
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        d = lo - hi
        ratio = np.where(d == 0, steps + 1.0, np.expm1((steps + 1) * d) / np.expm1(d))
        ratio = np.where(np.isneginf(lo), 1.0, ratio)
        total = np.exp(steps * hi) * ratio
        total = np.where(np.isneginf(hi), 0.0, total)
    return total - 0.5 * (np.exp(steps * u) + np.exp(steps * v))


@dataclass
class CellKernel:
    """Spectral data of ``T^steps`` for one potential, aggregated over cells."""

    vecs: np.ndarray
    log_mu: np.ndarray  # log(mu / mu_max), -inf for clipped modes
    log_top: float  # steps * log(mu_max)
    sums: np.ndarray  # sum over U_r x U_s of scaled T^steps
    log_k: np.ndarray  # log K_f on cells (mode applied)


class BridgeProblem:
    """Discretised data shared by the rate-function evaluators.

    Parameters
    ----------
    grid : Grid
    beta : float
    mode : BridgeMode or str
    partition : Partition, optional
        Defaults to one cell per grid node.
    m : "lebesgue", array_like, UniformBox or Atoms, optional
        Cell masses.  ``"lebesgue"`` (default) uses the node volume of each
        cell; an array gives the masses directly.
    g : array_like, optional
        Positive cell-pair weight.
    steps : int, optional
        Time steps; defaults to :func:`default_steps`.
    boundary : {"images", "truncate"}
    """

    def __init__(self, grid: Grid, beta: float, mode, partition=None, m="lebesgue",
                 g=None, steps: int | None = None, boundary: str = "images"):
        if not beta > 0:
            raise DomainError(f"beta must be positive, got {beta!r}")
        self.grid = grid
        self.beta = float(beta)
        self.mode = _mode(mode)
        self.partition = Partition.from_grid(grid) if partition is None else partition
        labels = self.partition.grid_labels(grid)
        if np.any(labels < 0):
            raise ConfigError("partition does not cover every grid node")
        self.labels = labels
        k = self.partition.size
        self.indicator = np.zeros((grid.size, k))
        self.indicator[np.arange(grid.size), labels] = 1.0
        self.node_counts = self.indicator.sum(axis=0)
        if np.any(self.node_counts == 0):
            raise ConfigError("every partition cell must contain at least one grid node")
        self.masses = self._cell_masses(m)
        self.log_g = None
        if g is not None:
            gv = np.asarray(g, dtype=float)
            if gv.shape != (k, k) or np.any(gv <= 0):
                raise ConfigError(f"g must be a positive {k}x{k} array")
            self.log_g = np.log(gv)
        self.steps = default_steps(grid, beta) if steps is None else int(steps)
        if self.steps < 1:
            raise DomainError("steps must be at least 1")
        self.tau = self.beta / self.steps
        self.boundary = boundary
        self.base = step_matrix(grid, self.tau, boundary)
        self._log_k0 = None
        if self.mode is BridgeMode.NORMALIZED:
            self._log_k0 = self._raw_kernel(np.zeros(grid.size))[1]

    @property
    def size(self) -> int:
        return self.partition.size

    def _cell_masses(self, m) -> np.ndarray:
        vol = self.node_counts * self.grid.cell_volume
        if isinstance(m, str):
            if m != "lebesgue":
                raise ConfigError(f"unknown measure {m!r}")
            return vol
        if hasattr(m, "mass"):
            masses = np.array([m.mass(*self.partition.bounds(r)) for r in range(self.size)])
        else:
            masses = np.asarray(m, dtype=float).ravel()
        if masses.shape != (self.size,) or np.any(masses <= 0):
            raise ConfigError(f"m must give {self.size} positive cell masses")
        return masses

    def cell_mass(self, p) -> np.ndarray:
        """Masses ``sum_{x in U_r} p(x) h^d`` of a density."""
        return values_of(p, self.grid) @ self.indicator * self.grid.cell_volume

    def transfer(self, f) -> np.ndarray:
        half = np.exp(0.5 * self.tau * values_of(f, self.grid))
        return half[:, None] * self.base * half[None, :]

    def _raw_kernel(self, f):
        w, v = np.linalg.eigh(self.transfer(f))
        top = w[-1]
        scaled = np.clip(w / top, 0.0, None)
        with np.errstate(divide="ignore"):
            log_mu = np.log(scaled)
        power = (v * scaled**self.steps) @ v.T
        sums = self.indicator.T @ power @ self.indicator
        with np.errstate(divide="ignore"):
            log_k = (np.log(sums) + self.steps * np.log(top) - math.log(self.grid.cell_volume)
                     - np.log(np.outer(self.node_counts, self.node_counts)))
        return (v, log_mu, self.steps * math.log(top), sums), log_k

    def kernel(self, f) -> CellKernel:
        (v, log_mu, log_top, sums), log_k = self._raw_kernel(f)
        if self._log_k0 is not None:
            log_k = log_k - self._log_k0
        return CellKernel(v, log_mu, log_top, sums, log_k)

    def log_a(self, ck: CellKernel) -> np.ndarray:
        out = np.log(self.masses)[None, :] + ck.log_k
        return out if self.log_g is None else out + self.log_g

    def pairing_gradient(self, ck: CellKernel, q: np.ndarray) -> np.ndarray:
        """``d/df_x sum_{r,s} q(r,s) log K_f(r,s)`` for every node ``x``."""
        with np.errstate(divide="ignore", invalid="ignore"):
            weights = np.where(q > 0, q / ck.sums, 0.0)
        r = self.indicator @ weights @ self.indicator.T
        core = (ck.vecs.T @ r @ ck.vecs) * _gamma(ck.log_mu, self.steps)
        return self.tau * np.einsum("ia,ab,ib->i", ck.vecs, core, ck.vecs)

    def occupation(self, f, q) -> GridFunction:
        """Mean occupation density of the ``f``-tilted bridge mixture with endpoints ``q``.

        Normalised so that ``sum rho h^d = 1`` for a probability ``q``.
        """
        qv = _entries(q)
        grad = self.pairing_gradient(self.kernel(f), qv)
        return GridFunction(self.grid, grad / (self.beta * self.grid.cell_volume))

    def objective(self, q, f, p, ck: CellKernel | None = None) -> float:
        qv = _entries(q)
        ck = self.kernel(f) if ck is None else ck
        fv = values_of(f, self.grid)
        pv = values_of(p, self.grid)
        pos = qv > 0
        value = pair_entropy(qv, self.masses)
        value += self.beta * float(fv @ pv) * self.grid.cell_volume
        value -= float(np.sum(qv[pos] * ck.log_k[pos]))
        if self.log_g is not None:
            value -= float(np.sum(qv[pos] * self.log_g[pos]))
        return value


# ---------------------------------------------------------------------------
# public evaluators


def objective_J(q, f, p, beta: float, m="lebesgue", g=None, *, mode, grid: Grid | None = None,
                partition: Partition | None = None, steps: int | None = None,
                boundary: str = "images") -> float:
    """Pair objective ``H(q|qbar x m) + beta<f,p> - <q, log K_f> - <q, log g>``.

    ``K_f`` is obtained from :func:`~symbridge.kernels.fk_bridge_log`, i.e. by
    repeated squaring of the transfer operator.
    """
    from .kernels import fk_bridge_log

    grid = _grid_of(p, f, grid)
    prob = BridgeProblem(grid, beta, mode, partition, m, g, steps, boundary)
    qv = _entries(q)
    if qv.shape != (prob.size, prob.size):
        raise ConfigError("q does not match the partition")

    def log_k(fv):
        scaled, log_scale = fk_bridge_log(grid, fv, beta, prob.steps, boundary)
        with np.errstate(divide="ignore"):
            return (np.log(prob.indicator.T @ scaled @ prob.indicator) + log_scale
                    - np.log(np.outer(prob.node_counts, prob.node_counts)))

    lk = log_k(values_of(f, grid))
    if prob.mode is BridgeMode.NORMALIZED:
        lk = lk - log_k(np.zeros(grid.size))
    ck = CellKernel(None, None, 0.0, None, lk)
    return prob.objective(qv, f, p, ck)


def _grid_of(p, f, grid):
    for obj in (p, f):
        if isinstance(obj, GridFunction):
            if grid is not None and obj.grid != grid:
                raise ConfigError("grid functions live on different grids")
            grid = obj.grid
    if grid is None:
        raise ConfigError("a grid is required")
    return grid


@dataclass
class SaddleState:
    """Pair measure, potential and objective history of a saddle solve."""

    q: PairMeasure
    f: GridFunction
    value_track: list = field(default_factory=list)
    iterations: int = 0
    marginal_gap: float = 0.0
    gradient_norm: float = 0.0


class SolveResult(NamedTuple):
    value: float
    f: GridFunction
    state: SaddleState


def _f_gradient_norm(prob: BridgeProblem, grad: np.ndarray) -> float:
    return float(np.abs(grad).max() / prob.grid.cell_volume)


def solve_J_q(q, p, beta: float, mode, *, partition: Partition | None = None,
              steps: int | None = None, boundary: str = "images", gtol: float = 1e-6,
              maxiter: int = 5_000, f0=None) -> SolveResult:
    """Maximise ``beta<f,p> - <q, log K_f>`` over grid potentials ``f``.

    The gradient in ``f`` is ``beta (p - rho_f) h^d`` with ``rho_f`` the
    occupation density of the tilted bridge mixture; it is obtained exactly
    from the eigendecomposition of the transfer operator.  L-BFGS is run
    until the sup norm of ``beta (p - rho_f)`` is below ``gtol``.

    Returns
    -------
    SolveResult
        ``value`` is the supremum and ``f`` a maximiser.  The maximiser is
        only defined up to an additive constant, which leaves the value
        unchanged.

    Raises
    ------
    ConvergenceError
        When ``gtol`` is not met within ``maxiter`` iterations.
    """
    grid = p.grid
    prob = BridgeProblem(grid, beta, mode, partition, "lebesgue", None, steps, boundary)
    qv = _entries(q)
    if qv.shape != (prob.size, prob.size):
        raise ConfigError("q does not match the partition")
    pv = values_of(p, grid)
    h = grid.cell_volume
    track: list[float] = []
    pos = qv > 0

    def neg(fv):
        ck = prob.kernel(fv)
        val = beta * float(fv @ pv) * h - float(np.sum(qv[pos] * ck.log_k[pos]))
        grad = beta * pv * h - prob.pairing_gradient(ck, qv)
        track.append(val)
        return -val, -grad

    f = np.zeros(grid.size) if f0 is None else values_of(f0, grid).copy()
    gnorm = math.inf
    iterations = 0
    while iterations < maxiter:
        res = minimize(neg, f, jac=True, method="L-BFGS-B",
                       options={"maxiter": maxiter - iterations, "gtol": 0.0, "ftol": 0.0, "maxcor": 30})
        iterations += max(int(res.nit), 1)
        f = res.x
        gnorm = _f_gradient_norm(prob, res.jac)
        if gnorm < gtol or res.nit == 0:
            break
    if not gnorm < gtol:
        raise ConvergenceError(
            f"f-ascent stopped with gradient sup norm {gnorm:.3g} >= {gtol:g}", track)
    state = SaddleState(PairMeasure(qv), GridFunction(grid, f), track, iterations, 0.0, gnorm)
    return SolveResult(track[-1] if track else -neg(f)[0], GridFunction(grid, f), state)


def tilted_occupation(q, f, beta: float, grid: Grid, mode="canonical", *,
                      partition: Partition | None = None, steps: int | None = None,
                      boundary: str = "images") -> GridFunction:
    """Occupation density ``rho_f`` of the ``f``-tilted bridge mixture with endpoint law ``q``."""
    prob = BridgeProblem(grid, beta, mode, partition, "lebesgue", None, steps, boundary)
    return prob.occupation(f, q)


def solve_J_sym(p: DensityOnGrid, m, beta: float, mode, g=None, *,
                partition: Partition | None = None, steps: int | None = None,
                boundary: str = "images", gtol: float = 1e-6, maxiter: int = 2_000,
                f0=None) -> SolveResult:
    """Saddle value ``inf_q sup_f`` of the pair objective.

    Alternates a q-descent to the equal-marginal minimiser for the current
    ``f`` (:func:`q_descent`, warm-started) with an L-BFGS step in ``f`` on
    ``f -> beta<f,p> + min_q(...)``, whose gradient is ``beta p h^d`` minus
    the occupation of the current minimiser.

    Parameters
    ----------
    p : DensityOnGrid
    m : "lebesgue", array_like, UniformBox or Atoms
        Cell masses.
    mode : BridgeMode or str
        No default.
    g : array_like, optional
        Positive cell-pair weight.
    gtol : float
        Target sup norm of ``beta (p - rho)`` in density units.  The
        optimiser is stopped early once it can no longer make progress;
        the achieved norm is stored in the state.

    Returns
    -------
    SolveResult
        ``value``, the potential ``f`` and the :class:`SaddleState`.
    """
    grid = p.grid
    prob = BridgeProblem(grid, beta, mode, partition, m, g, steps, boundary)
    pv = values_of(p, grid)
    h = grid.cell_volume
    track: list[float] = []
    q_hist: list[float] = []
    warm = {"q": None}

    def neg(fv):
        ck = prob.kernel(fv)
        la = prob.log_a(ck)
        q = q_descent(la, warm["q"], history=q_hist)
        warm["q"] = q
        val = beta * float(fv @ pv) * h + _inner_objective(q, la)
        grad = beta * pv * h - prob.pairing_gradient(ck, q)
        track.append(val)
        return -val, -grad

    f = np.zeros(grid.size) if f0 is None else values_of(f0, grid).copy()
    res = minimize(neg, f, jac=True, method="L-BFGS-B",
                   options={"maxiter": maxiter, "gtol": 0.0, "ftol": 1e-15, "maxcor": 30})
    f = res.x
    if not np.all(np.isfinite(f)):
        raise ConvergenceError("f-ascent produced non-finite values", track)
    ck = prob.kernel(f)
    q = q_descent(prob.log_a(ck), warm["q"], history=q_hist)
    grad = beta * pv * h - prob.pairing_gradient(ck, q)
    gnorm = _f_gradient_norm(prob, grad)
    if res.status not in (0, 2) and gnorm >= gtol:
        raise ConvergenceError(f"f-ascent failed: {res.message}", track)
    value = prob.objective(q, f, pv, ck)
    qm = PairMeasure(q)
    state = SaddleState(qm, GridFunction(grid, f), track, int(res.nit), qm.marginal_gap(), gnorm)
    return SolveResult(value, state.f, state)


class JidentResult(NamedTuple):
    f_star: GridFunction
    q_star: PairMeasure
    value: float
    eigenvalue: float
    marginal_tv: float


def support_hull(p, rtol: float = SUPPORT_RTOL) -> np.ndarray:
    """Nodes where ``p > rtol * max p``."""
    vals = np.asarray(p.values if isinstance(p, GridFunction) else p)
    return vals > rtol * vals.max()


def jident_construct(p: DensityOnGrid, beta: float, *, steps: int | None = None,
                     boundary: str = "images") -> JidentResult:
    """Explicit optimal pair ``(f*, q*)`` for a density with smooth square root.

    ``phi = sqrt(p)``, ``f* = -Delta phi / phi`` by central differences on the
    support hull and extended by the nearest hull value outside it, and
    ``q*(x, y) = phi(x) phi(y) k_beta^{f*}(x, y) h^{2d}`` normalised.  The value
    is ``beta <f*, p>``; ``eigenvalue`` is the principal eigenvalue of the
    finite-difference ``Delta + f*``, which vanishes when the hull is the whole grid.
    """
    grid = p.grid
    pv = values_of(p, grid)
    phi = np.sqrt(np.clip(pv, 0.0, None))
    hull = support_hull(pv)
    fstar = np.zeros(grid.size)
    fstar[hull] = -apply_laplacian(grid, phi)[hull] / phi[hull]
    if not hull.all():
        _, nearest = ndimage.distance_transform_edt(~hull.reshape(grid.shape), return_indices=True)
        flat = np.ravel_multi_index(tuple(nearest), grid.shape).ravel()
        fstar = fstar[flat]
    lam, _ = principal_eigen(grid, fstar)
    prob = BridgeProblem(grid, beta, BridgeMode.CANONICAL, None, "lebesgue", None, steps, boundary)
    ck = prob.kernel(fstar)
    power = (ck.vecs * np.exp(prob.steps * ck.log_mu)) @ ck.vecs.T
    q = phi[:, None] * np.clip(power, 0.0, None) * phi[None, :]
    q = 0.5 * (q + q.T)
    q /= q.sum()
    value = beta * float(fstar @ pv) * grid.cell_volume
    tv = 0.5 * float(np.abs(q.sum(axis=1) - pv * grid.cell_volume).sum())
    return JidentResult(GridFunction(grid, fstar), PairMeasure(q), value, lam, tv)


# ---------------------------------------------------------------------------
# discrete pair problem and permanents


def solve_pair_entropy(m, g, tol: float = 1e-13, maxiter: int = 5_000) -> tuple[float, PairMeasure]:
    """``min_q H(q | qbar x m) - <q, log g>`` over equal-marginal ``q`` on atoms.

    Mirror descent with marginal balancing; the minimum equals
    ``-log rho(m_s g(r, s))``.
    """
    mv = np.asarray(getattr(m, "weights", m), dtype=float).ravel()
    gv = np.asarray(g, dtype=float)
    if np.any(mv <= 0):
        raise DomainError("atom weights must be positive")
    if gv.shape != (mv.size, mv.size) or np.any(gv <= 0):
        raise DomainError("g must be a positive square matrix matching the atoms")
    mv = mv / mv.sum()
    log_a = np.log(mv)[None, :] + np.log(gv)
    q = q_descent(log_a, np.outer(mv, mv), tol=tol, maxiter=maxiter)
    return _inner_objective(q, log_a), PairMeasure(q)


def permanent(a: np.ndarray) -> float:
    """Permanent by Ryser's formula with Gray-code updates."""
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    if n == 0:
        return 1.0
    total = 0.0
    row_sums = np.zeros(n)
    prev = 0
    for k in range(1, 2**n):
        gray = k ^ (k >> 1)
        j = (gray ^ prev).bit_length() - 1
        row_sums += a[:, j] if gray & (1 << j) else -a[:, j]
        prev = gray
        total += (-1) ** bin(gray).count("1") * np.prod(row_sums)
    return float((-1) ** n * total)


PERMANENT_MAX_N = 10
PERMANENT_MAX_ATOMS = 3


def permanent_average(m, g, n: int) -> float:
    """``(1/n!) sum_sigma E[prod_i g(X_i, X_sigma(i))]`` for ``X_i`` i.i.d. from atoms ``m``.

    Assignments are grouped by their occupation counts ``c``: all have the
    same permanent, so the value is
    ``sum_c multinomial(n; c) prod m^c perm(g[c]) / n!``, summed in log space.
    Limited to ``n <= 10`` and at most 3 atoms.
    """
    mv = np.asarray(getattr(m, "weights", m), dtype=float).ravel()
    gv = np.asarray(g, dtype=float)
    k = mv.size
    if n < 1:
        raise DomainError("n must be at least 1")
    if n > PERMANENT_MAX_N or k > PERMANENT_MAX_ATOMS:
        raise GuardError(
            f"exact permanent averages are limited to n <= {PERMANENT_MAX_N} and "
            f"at most {PERMANENT_MAX_ATOMS} atoms; got n={n}, atoms={k}")
    if gv.shape != (k, k) or np.any(gv < 0):
        raise DomainError("g must be a nonnegative square matrix matching the atoms")
    mv = mv / mv.sum()
    logs = []
    for c in itertools.product(range(n + 1), repeat=k):
        if sum(c) != n or any(ci > 0 and mv[j] == 0 for j, ci in enumerate(c)):
            continue
        labels = np.repeat(np.arange(k), c)
        perm = permanent(gv[np.ix_(labels, labels)])
        if perm <= 0:
            continue
        log_mult = gammaln(n + 1) - sum(gammaln(ci + 1) for ci in c)
        log_m = sum(ci * math.log(mv[j]) for j, ci in enumerate(c) if ci)
        logs.append(log_mult + log_m + math.log(perm) - gammaln(n + 1))
    return float(np.exp(logsumexp(logs))) if logs else 0.0
