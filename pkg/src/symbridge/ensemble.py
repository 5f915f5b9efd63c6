"""Samplers for symmetrised bridge ensembles and their empirical estimators.

Randomness comes from counter-based streams: ensemble ``index`` under master
``seed`` always uses ``Generator(Philox(SeedSequence(seed, spawn_key=(index,))))``,
so ensembles can be drawn in any order or on any worker.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import truncnorm

from .combinatorics import PairMeasure
from .errors import ConfigError, DomainError
from .grid import Grid, GridFunction, Partition
from .kernels import build_transfer


def spawn_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent stream for ``(seed, *key)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=tuple(key))))


def _rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None:
        raise ConfigError("an rng or an integer seed is required")
    return spawn_rng(int(rng))


# ---------------------------------------------------------------------------
# initial measures


@dataclass(frozen=True)
class UniformBox:
    """Lebesgue measure on a box, normalised."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ConfigError("uniform measure needs lo < hi on every axis (positive mass)")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.size

    def sample(self, rng, size: int) -> np.ndarray:
        return self.lo + (self.hi - self.lo) * rng.random((size, self.dim))

    def mass(self, lo, hi) -> float:
        """Normalised mass of the box ``[lo, hi]``."""
        width = np.clip(np.minimum(hi, self.hi) - np.maximum(lo, self.lo), 0.0, None)
        return float(np.prod(width / (self.hi - self.lo)))

    def restricted(self, lo, hi) -> "UniformBox":
        return UniformBox(np.maximum(lo, self.lo), np.minimum(hi, self.hi))


@dataclass(frozen=True)
class Atoms:
    """Finitely many weighted points."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.asarray(self.weights, dtype=float).ravel()
        if len(w) != len(pts):
            raise ConfigError("one weight per atom is required")
        if np.any(w < 0) or not w.sum() > 0:
            raise ConfigError("atom weights must be nonnegative with positive total mass")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w / w.sum())

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def sample(self, rng, size: int) -> np.ndarray:
        return self.points[rng.choice(len(self.weights), size=size, p=self.weights)]

    def mass(self, lo, hi) -> float:
        inside = np.all((self.points >= lo) & (self.points <= hi), axis=1)
        return float(self.weights[inside].sum())

    def restricted(self, lo, hi) -> "Atoms":
        inside = np.all((self.points >= lo) & (self.points <= hi), axis=1)
        return Atoms(self.points[inside], self.weights[inside])


InitialMeasure = UniformBox | Atoms


def initial_measure(spec) -> InitialMeasure:
    """Build an initial measure from ``{"type": "uniform"|"atoms", ...}``."""
    if isinstance(spec, (UniformBox, Atoms)):
        return spec
    kind = spec.get("type")
    if kind == "uniform":
        return UniformBox(spec["lo"], spec["hi"])
    if kind == "atoms":
        return Atoms(spec["points"], spec["weights"])
    raise ConfigError(f"m.type must be 'uniform' or 'atoms', got {kind!r}")


# ---------------------------------------------------------------------------
# samples


@dataclass(frozen=True)
class Path:
    beta: float
    times: np.ndarray
    points: np.ndarray


@dataclass(frozen=True)
class EnsembleSample:
    """One draw of ``n`` bridges with their permutation and endpoints.

    ``paths`` has shape ``(n, steps + 1, d)`` or is None when only the
    endpoints were sampled.  ``sigma`` is None for mixture ensembles, where
    ends are not a permutation of starts.
    """

    starts: np.ndarray = field(repr=False)
    ends: np.ndarray = field(repr=False)
    beta: float
    sigma: np.ndarray | None = field(default=None, repr=False)
    paths: np.ndarray | None = field(default=None, repr=False)
    log_weight: float = 0.0
    seed: int | None = None
    index: int = 0

    @property
    def n(self) -> int:
        return len(self.starts)

    @property
    def steps(self) -> int | None:
        return None if self.paths is None else self.paths.shape[1] - 1

    def path(self, i: int) -> Path:
        if self.paths is None:
            raise ConfigError("this sample was drawn without paths")
        return Path(self.beta, np.linspace(0.0, self.beta, self.steps + 1), self.paths[i])

    def summary(self) -> dict:
        out = {
            "index": self.index,
            "seed": None if self.seed is None else str(self.seed),
            "n": self.n,
            "sigma": None if self.sigma is None else self.sigma.tolist(),
            "starts": self.starts.tolist(),
            "ends": self.ends.tolist(),
            "log_weight": self.log_weight,
        }
        return out


def sample_bridges(starts, ends, beta: float, steps: int, rng) -> np.ndarray:
    """Vectorised bridges from ``starts[i]`` to ``ends[i]``; shape ``(n, steps+1, d)``.

    A free path ``W`` with Gaussian increments of variance ``2 tau`` per
    coordinate is corrected to ``W_t + (t/beta)(y - W_beta)``.  Both endpoints
    are copied in exactly.
    """
    if steps < 1:
        raise DomainError("steps must be at least 1")
    if not beta > 0:
        raise DomainError(f"beta must be positive, got {beta!r}")
    rng = _rng(rng)
    x = np.atleast_2d(np.asarray(starts, dtype=float))
    y = np.atleast_2d(np.asarray(ends, dtype=float))
    n, d = x.shape
    tau = beta / steps
    incr = rng.standard_normal((n, steps, d)) * math.sqrt(2.0 * tau)
    w = np.concatenate([np.zeros((n, 1, d)), np.cumsum(incr, axis=1)], axis=1)
    frac = (np.arange(steps + 1) / steps)[None, :, None]
    paths = x[:, None, :] + w + frac * ((y - x)[:, None, :] - w[:, -1:, :])
    paths[:, 0, :] = x
    paths[:, -1, :] = y
    return paths


def sample_bridge(x, y, beta: float, steps: int, rng) -> Path:
    """Discretised bridge of the ``Delta``-motion from ``x`` to ``y`` in time ``beta``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape != y.shape:
        raise DomainError("x and y must have the same dimension")
    pts = sample_bridges(x[None], y[None], beta, steps, rng)[0]
    return Path(float(beta), np.linspace(0.0, beta, steps + 1), pts)


def sample_sym(
    m,
    n: int,
    beta: float,
    steps: int,
    g: Callable | None = None,
    rng=None,
    *,
    seed: int | None = None,
    index: int = 0,
    with_paths: bool = True,
) -> EnsembleSample:
    """Draw from the symmetrised bridge ensemble.

    A uniform permutation ``sigma`` is drawn first, then i.i.d. starts from
    ``m``; bridge ``i`` runs from ``starts[i]`` to ``starts[sigma[i]]``.

    Parameters
    ----------
    m : UniformBox, Atoms or dict
    n : int
        Number of particles.
    g : callable, optional
        Pair weight ``g(x, y)`` evaluated row-wise on ``(n, d)`` arrays.
        Recorded as ``log_weight = sum_i log g(x_i, x_sigma(i))``.
    rng : Generator or int, optional
        Explicit stream.  Otherwise ``seed`` and ``index`` select one.
    with_paths : bool
        Skip bridge simulation when only endpoints are needed.
    """
    if n < 1:
        raise DomainError("n must be at least 1")
    m = initial_measure(m)
    if rng is None:
        if seed is None:
            raise ConfigError("give either rng or seed")
        rng = spawn_rng(seed, index)
    rng = _rng(rng)
    sigma = rng.permutation(n)
    starts = m.sample(rng, n)
    ends = starts[sigma]
    log_weight = 0.0
    if g is not None:
        gv = np.asarray(g(starts, ends), dtype=float)
        log_weight = float(np.sum(np.log(gv)))
    paths = sample_bridges(starts, ends, beta, steps, rng) if with_paths else None
    return EnsembleSample(starts, ends, float(beta), sigma, paths, log_weight, seed, index)


def _truncated_gaussian(rng, mean: np.ndarray, scale: float, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    a = (lo - mean) / scale
    b = (hi - mean) / scale
    return truncnorm.rvs(a, b, loc=mean, scale=scale, random_state=rng)


def sample_mixture(
    eta: PairMeasure,
    n: int,
    partition: Partition,
    beta: float,
    steps: int,
    rng,
    m=None,
    *,
    with_paths: bool = True,
) -> EnsembleSample:
    """Stratified cell-pair bridge ensemble.

    For every ``(r, s)`` exactly ``n eta(r, s)`` paths are drawn: the start
    from ``m`` restricted to ``U_r``, the end from the density proportional to
    ``p_beta(x, y)`` on ``U_s``, and a bridge in between.  ``m`` defaults to
    the uniform measure on the partition's box.
    """
    counts = eta.grid_counts(n)
    if eta.sigma_size != partition.size:
        raise ConfigError("eta and partition disagree on the number of cells")
    rng = _rng(rng)
    m = UniformBox(partition.lo, partition.hi) if m is None else initial_measure(m)
    scale = math.sqrt(2.0 * beta)
    starts, ends = [], []
    shape = partition.shape
    for r, s in zip(*np.nonzero(counts)):
        c = int(counts[r, s])
        rlo, rhi = partition.bounds(r)
        slo, shi = partition.bounds(s)
        x = m.restricted(rlo, rhi).sample(rng, c)
        if isinstance(m, UniformBox):
            # keep starts inside the half-open cell
            last = np.array(np.unravel_index(r, shape)) == np.array(shape) - 1
            x = np.where(last | (x < rhi), x, np.nextafter(rhi, -np.inf))
        y = _truncated_gaussian(rng, x, scale, slo, shi)
        y = np.atleast_2d(y).reshape(c, -1)
        last = np.array(np.unravel_index(s, shape)) == np.array(shape) - 1
        y = np.where(last | (y < shi), y, np.nextafter(shi, -np.inf))
        starts.append(x)
        ends.append(y)
    starts = np.concatenate(starts)
    ends = np.concatenate(ends)
    paths = sample_bridges(starts, ends, beta, steps, rng) if with_paths else None
    return EnsembleSample(starts, ends, float(beta), None, paths)


def mixture_end_law(
    partition: Partition, r: int, s: int, beta: float, bins: int = 10, m=None, nodes: int = 64
) -> tuple[np.ndarray, np.ndarray]:
    """Law of the end point of a ``(r, s)`` mixture path over sub-bins of ``U_s`` (1-D).

    The end has density proportional to ``p_beta(x, y)`` on ``U_s`` given the
    start ``x``, and ``x`` is uniform on ``U_r``.  The start is integrated out
    with Gauss-Legendre quadrature.

    Returns
    -------
    edges : ndarray
        ``bins + 1`` equally spaced edges of ``U_s``.
    probs : ndarray
        Probability of each sub-bin.
    """
    from scipy.special import ndtr

    if partition.dim != 1:
        raise ConfigError("mixture_end_law is implemented for one-dimensional partitions")
    if m is not None and not isinstance(initial_measure(m), UniformBox):
        raise ConfigError("mixture_end_law needs a uniform initial measure")
    (a,), (b,) = partition.bounds(r)
    (c,), (d,) = partition.bounds(s)
    edges = np.linspace(c, d, bins + 1)
    z, w = np.polynomial.legendre.leggauss(nodes)
    x = 0.5 * (b - a) * z + 0.5 * (a + b)
    scale = math.sqrt(2.0 * beta)
    cdf = ndtr((edges[:, None] - x) / scale)
    mass = np.diff(cdf, axis=0)
    return edges, (mass / mass.sum(axis=0)) @ (0.5 * w)


# ---------------------------------------------------------------------------
# estimators


@dataclass(frozen=True)
class Occupation(GridFunction):
    """Occupation density with the count of points that fell outside the box."""

    overflow: int = 0
    total: int = 0

    @property
    def flagged(self) -> bool:
        return self.overflow > 0


def occupation(sample: EnsembleSample, grid: Grid) -> Occupation:
    """Mean occupation density of the paths over the nodes of ``grid``.

    Every path point is assigned to the node whose cell contains it and the
    histogram is divided by ``n (steps + 1) h^d``.  Points outside the box are
    counted in ``overflow`` instead.
    """
    if sample.paths is None:
        raise ConfigError("occupation needs a sample drawn with paths")
    pts = sample.paths.reshape(-1, sample.paths.shape[-1])
    if pts.shape[1] != grid.dim:
        raise ConfigError("path dimension does not match the grid")
    idx = grid.node_index(pts)
    inside = idx >= 0
    hist = np.bincount(idx[inside], minlength=grid.size).astype(float)
    total = len(pts)
    return Occupation(grid, hist / (total * grid.cell_volume), int((~inside).sum()), total)


def endpoint_pairs(sample: EnsembleSample, partition: Partition) -> PairMeasure:
    """Empirical law of ``(cell(start_i), cell(end_i))`` as a pair measure."""
    a = partition.labels(sample.starts)
    b = partition.labels(sample.ends)
    if np.any(a < 0) or np.any(b < 0):
        raise DomainError("an endpoint lies outside every cell of the partition")
    k = partition.size
    counts = np.bincount(a * k + b, minlength=k * k).reshape(k, k)
    return PairMeasure.from_counts(counts)


def sample_many(draw: Callable[[int], object], count: int, threads: int = 1) -> list:
    """Evaluate ``draw(index)`` for ``index = 0..count-1`` in index order.

    Results are identical for any ``threads`` because every index owns its
    random stream.
    """
    if threads <= 1:
        return [draw(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(draw, range(count)))


# ---------------------------------------------------------------------------
# exact sampler for the killed, unweighted Bose ensemble


def _log_partition(log_traces: np.ndarray) -> np.ndarray:
    """``log Z_0..log Z_N`` from ``log_traces[k-1] = log tr(K^k)`` by cycle recursion."""
    n = len(log_traces)
    logz = np.zeros(n + 1)
    for j in range(1, n + 1):
        terms = log_traces[:j] + logz[j - 1::-1][:j]
        top = terms.max()
        logz[j] = top + math.log(np.exp(terms - top).sum()) - math.log(j)
    return logz


def sample_canonical(
    grid: Grid,
    n: int,
    beta: float,
    steps: int,
    rng,
    *,
    boundary: str = "images",
) -> EnsembleSample:
    """Exact draw from the killed symmetrised ensemble on the grid nodes.

    Each cycle of ``sigma`` carries one closed path whose weight is the product
    of killed heat-kernel steps, the discrete analogue of uniform starts with
    pair weight ``k^D_beta(x, x_sigma(i))``.  Cycle lengths follow the canonical
    recursion, each closed path is drawn by backward conditioning on the
    transfer kernel, and the paths are cut into ``beta``-segments.  Points are
    grid nodes.
    """
    if n < 1:
        raise DomainError("n must be at least 1")
    rng = _rng(rng)
    op = build_transfer(grid, 0.0, beta / steps, boundary)
    mu, vecs = op.eigh
    mu = np.clip(mu, 0.0, None)
    top = mu.max()
    lmu = np.log(np.where(mu > 0, mu / top, 1.0))
    lmu[mu <= 0] = -np.inf

    # cycle lengths: particle-1 cycle has length k with prob Z1(k) Z_{n-k} / (n Z_n)
    k_idx = np.arange(1, n + 1)
    log_tr = np.array([np.logaddexp.reduce(k * steps * lmu) for k in k_idx])
    logz = _log_partition(log_tr)
    lengths = []
    rest = n
    while rest > 0:
        ks = np.arange(1, rest + 1)
        lp = log_tr[ks - 1] + logz[rest - ks] - logz[rest] - math.log(rest)
        p = np.exp(lp - lp.max())
        k = int(rng.choice(ks, p=p / p.sum()))
        lengths.append(k)
        rest -= k

    # closed paths, all cycles advanced together
    scaled_mu = np.where(mu > 0, mu / top, 0.0)
    kernel = op.kernel / top
    total_steps = np.array(lengths) * steps
    diag = np.array([(vecs**2) @ scaled_mu**L for L in total_steps])  # (cycles, size)
    diag = np.clip(diag, 0.0, None)
    x0 = np.array([rng.choice(grid.size, p=row / row.sum()) for row in diag])
    walk = np.zeros((len(lengths), total_steps.max() + 1), dtype=np.int64)
    walk[:, 0] = x0
    pos = x0.copy()
    for j in range(total_steps.max()):
        active = np.nonzero(total_steps > j)[0]
        remaining = total_steps[active] - j - 1
        back = vecs @ (scaled_mu[:, None] ** remaining[None, :] * vecs[x0[active]].T)
        prob = np.clip(kernel[pos[active]] * back.T, 0.0, None)
        prob /= prob.sum(axis=1, keepdims=True)
        u = rng.random(len(active))
        nxt = (prob.cumsum(axis=1) < u[:, None]).sum(axis=1)
        pos[active] = np.minimum(nxt, grid.size - 1)
        walk[active, j + 1] = pos[active]

    # cut cycles into particles, then label particles uniformly
    segments, sigma_cycles = [], []
    first = 0
    for c, k in enumerate(lengths):
        for i in range(k):
            segments.append(walk[c, i * steps:(i + 1) * steps + 1])
        sigma_cycles.append(list(range(first, first + k)))
        first += k
    order = rng.permutation(n)  # particle order[i] is the i-th segment
    seg = np.array(segments)
    paths_idx = np.empty_like(seg)
    paths_idx[order] = seg
    sigma = np.empty(n, dtype=np.int64)
    for cyc in sigma_cycles:
        for a, b in zip(cyc, cyc[1:] + cyc[:1]):
            sigma[order[a]] = order[b]
    paths = grid.points[paths_idx]
    starts = paths[:, 0, :]
    return EnsembleSample(starts, starts[sigma], float(beta), sigma, paths)
