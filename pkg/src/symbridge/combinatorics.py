"""Permutation combinatorics: cycle types, pair-count identities, rounding.

Labels of the coarse index set are ``0..k-1`` and permutations are 0-based
integer arrays ``sigma`` with ``i -> sigma[i]``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, DomainError, GuardError, PreconditionError

SUM_TOL = 1e-12
GRID_TOL = 1e-9

BRUTE_MAX_N = 8
BRUTE_MAX_SIGMA = 3


@dataclass(frozen=True)
class PairMeasure:
    """Probability measure on ``Sigma x Sigma``.

    ``counts`` and ``n`` are set for measures on the ``(1/n)``-grid, in which
    case ``entries == counts / n`` and all identities can be checked with
    integer arithmetic.
    """

    entries: np.ndarray = field(repr=False)
    counts: np.ndarray | None = field(default=None, repr=False, compare=False)
    n: int | None = None

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=float)
        if e.ndim != 2 or e.shape[0] != e.shape[1] or e.shape[0] == 0:
            raise ConfigError("pair measure entries must be a nonempty square array")
        if np.any(e < 0) or not np.all(np.isfinite(e)):
            raise DomainError("pair measure entries must be finite and nonnegative")
        if abs(e.sum() - 1.0) > 1e-10:
            raise DomainError(f"pair measure sums to {e.sum()!r}, expected 1")
        object.__setattr__(self, "entries", e)

    @classmethod
    def from_counts(cls, counts, n: int | None = None) -> "PairMeasure":
        c = np.asarray(counts, dtype=np.int64)
        total = int(c.sum())
        if n is not None and total != n:
            raise DomainError(f"counts sum to {total}, expected {n}")
        if np.any(c < 0):
            raise DomainError("counts must be nonnegative")
        return cls(c / total, c, total)

    @classmethod
    def normalized(cls, weights) -> "PairMeasure":
        w = np.asarray(weights, dtype=float)
        return cls(w / w.sum())

    @property
    def sigma_size(self) -> int:
        return self.entries.shape[0]

    @property
    def first_marginal(self) -> np.ndarray:
        return self.entries.sum(axis=1)

    @property
    def second_marginal(self) -> np.ndarray:
        return self.entries.sum(axis=0)

    @property
    def mean_marginal(self) -> np.ndarray:
        return 0.5 * (self.first_marginal + self.second_marginal)

    def marginal_gap(self) -> float:
        if self.counts is not None:
            return float(np.abs(self.counts.sum(1) - self.counts.sum(0)).max() / self.n)
        return float(np.abs(self.first_marginal - self.second_marginal).max())

    def is_shift_invariant(self, tol: float = SUM_TOL) -> bool:
        return self.marginal_gap() <= tol

    def grid_counts(self, n: int) -> np.ndarray:
        """Integer numerators of ``n * entries``.

        Raises
        ------
        PreconditionError
            If some ``n * eta(r, s)`` is not an integer; the first offending
            pair is named.
        """
        if self.counts is not None and self.n == n:
            return self.counts
        scaled = n * self.entries
        rounded = np.rint(scaled)
        bad = np.argwhere(np.abs(scaled - rounded) > GRID_TOL)
        if len(bad):
            r, s = bad[0]
            raise PreconditionError(
                f"n*eta({r},{s}) = {scaled[r, s]!r} is not an integer for n={n}"
            )
        return rounded.astype(np.int64)

    def to_dict(self) -> dict:
        return {"sigma": self.sigma_size, "entries": self.entries.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PairMeasure":
        try:
            entries = np.asarray(d["entries"], dtype=float)
        except KeyError:
            raise ConfigError("pair measure JSON needs 'entries'") from None
        if "sigma" in d and int(d["sigma"]) != entries.shape[0]:
            raise ConfigError("pair measure 'sigma' does not match entries")
        return cls(entries)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass(frozen=True)
class CycleType:
    """Cycle counts ``counts[k-1]`` = number of cycles of length ``k``."""

    counts: tuple[int, ...]

    def __post_init__(self):
        if any(c < 0 for c in self.counts):
            raise DomainError("cycle counts must be nonnegative")

    @property
    def n(self) -> int:
        return sum((k + 1) * c for k, c in enumerate(self.counts))

    @property
    def num_cycles(self) -> int:
        return sum(self.counts)

    def count(self, k: int) -> int:
        return self.counts[k - 1] if 1 <= k <= len(self.counts) else 0

    def class_size(self) -> int:
        """Number of permutations with this cycle type."""
        denom = 1
        for k, c in enumerate(self.counts, start=1):
            denom *= k**c * math.factorial(c)
        return math.factorial(self.n) // denom


def _check_permutation(sigma) -> np.ndarray:
    s = np.asarray(sigma)
    if s.ndim != 1 or not np.issubdtype(s.dtype, np.integer):
        raise DomainError("a permutation must be a 1-D integer array")
    if not np.array_equal(np.sort(s), np.arange(len(s))):
        raise DomainError("sigma is not a bijection of {0, ..., n-1}")
    return s


def cycle_type(sigma) -> CycleType:
    """Cycle type of a 0-based permutation."""
    s = _check_permutation(sigma)
    n = len(s)
    seen = np.zeros(n, dtype=bool)
    counts = [0] * n
    for i in range(n):
        if seen[i]:
            continue
        length = 0
        j = i
        while not seen[j]:
            seen[j] = True
            j = s[j]
            length += 1
        counts[length - 1] += 1
    return CycleType(tuple(counts))


def cycle_types(n: int) -> Iterator[CycleType]:
    """All cycle types of ``Sym_n`` (integer partitions of ``n``)."""

    def parts(rest: int, largest: int):
        if rest == 0:
            yield ()
            return
        for k in range(min(rest, largest), 0, -1):
            for tail in parts(rest - k, k):
                yield (k,) + tail

    for p in parts(n, n):
        counts = [0] * n
        for k in p:
            counts[k - 1] += 1
        yield CycleType(tuple(counts))


def _marginals_equal(counts: np.ndarray) -> bool:
    return bool(np.array_equal(counts.sum(axis=1), counts.sum(axis=0)))


def _grid_counts_checked(eta: PairMeasure, n: int) -> np.ndarray:
    if n < 1:
        raise DomainError("n must be positive")
    counts = eta.grid_counts(n)
    if not _marginals_equal(counts):
        raise PreconditionError("eta must have equal marginals")
    return counts


def _prod_factorials(values) -> int:
    out = 1
    for v in np.asarray(values).ravel():
        out *= math.factorial(int(v))
    return out


def count_sym_total(eta: PairMeasure, n: int) -> int:
    """``sum_R #Sym_n(R, eta) = n! prod_r (n etabar(r))! / prod_{r,s} (n eta(r,s))!``."""
    counts = _grid_counts_checked(eta, n)
    return math.factorial(n) * _prod_factorials(counts.sum(axis=1)) // _prod_factorials(counts)


class FixedRCount(NamedTuple):
    count: int
    admissible: bool


def count_sym_fixed_R(R: Sequence[int], eta: PairMeasure, n: int) -> FixedRCount:
    """Number of ``sigma`` with ``#{i: R_i = r, R_sigma(i) = s} = n eta(r, s)``.

    Returns ``FixedRCount(0, False)`` when the label frequencies of ``R``
    differ from ``n etabar``.
    """
    counts = _grid_counts_checked(eta, n)
    R = np.asarray(R, dtype=np.int64)
    if R.shape != (n,) or R.min(initial=0) < 0 or R.max(initial=0) >= eta.sigma_size:
        raise DomainError(f"R must be a length-{n} sequence of labels in 0..{eta.sigma_size - 1}")
    freq = np.bincount(R, minlength=eta.sigma_size)
    row = counts.sum(axis=1)
    if not np.array_equal(freq, row):
        return FixedRCount(0, False)
    return FixedRCount(_prod_factorials(row) ** 2 // _prod_factorials(counts), True)


def _guard(n: int, k: int) -> None:
    if n > BRUTE_MAX_N or k > BRUTE_MAX_SIGMA or n < 1 or k < 1:
        raise GuardError(
            f"brute-force enumeration is limited to 1 <= n <= {BRUTE_MAX_N} and "
            f"1 <= |Sigma| <= {BRUTE_MAX_SIGMA}; got n={n}, |Sigma|={k}"
        )


@lru_cache(maxsize=None)
def _permutations(n: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(n))), dtype=np.int64)


def _encode(counts: np.ndarray, n: int) -> int:
    weights = (n + 1) ** np.arange(counts.size, dtype=np.int64)
    return int(counts.ravel() @ weights)


def _pair_count_keys(labels: np.ndarray, n: int, k: int) -> np.ndarray:
    """Encoded pair-count matrix of every ``(R, sigma)`` for the given rows ``R``.

    Returns an array of shape ``(len(labels), n!)``.
    """
    perms = _permutations(n)
    codes = labels[:, None, :] * k + labels[:, perms]
    weights = (n + 1) ** np.arange(k * k, dtype=np.int64)
    keys = np.zeros(codes.shape[:2], dtype=np.int64)
    for c in range(k * k):
        keys += (codes == c).sum(axis=-1) * weights[c]
    return keys


def _label_chunks(n: int, k: int, chunk: int = 256):
    rows = itertools.product(range(k), repeat=n)
    while True:
        block = list(itertools.islice(rows, chunk))
        if not block:
            return
        yield np.array(block, dtype=np.int64)


def brute_force_count(n: int, sigma_size: int, eta: PairMeasure) -> int:
    """Literal count of ``(R, sigma)`` whose pair counts equal ``n eta``.

    Enumerates all ``sigma`` in ``Sym_n`` and ``R`` in ``Sigma^n``.  Limited to
    ``n <= 8`` and ``|Sigma| <= 3``.
    """
    _guard(n, sigma_size)
    if eta.sigma_size != sigma_size:
        raise ConfigError("eta does not live on the stated Sigma")
    target = _encode(eta.grid_counts(n), n)
    return sum(int(np.count_nonzero(_pair_count_keys(block, n, sigma_size) == target))
               for block in _label_chunks(n, sigma_size))


def brute_force_count_fixed_R(R: Sequence[int], eta: PairMeasure, n: int) -> int:
    """Literal count of ``sigma`` in ``Sym_n`` realising ``n eta`` for a fixed ``R``."""
    k = eta.sigma_size
    _guard(n, k)
    R = np.asarray(R, dtype=np.int64).reshape(1, n)
    target = _encode(eta.grid_counts(n), n)
    return int(np.count_nonzero(_pair_count_keys(R, n, k) == target))


@lru_cache(maxsize=None)
def brute_force_table(n: int, k: int) -> dict[int, int]:
    """Histogram ``{encoded pair counts: #(R, sigma)}`` over ``Sigma^n x Sym_n``.

    One enumeration serves every ``eta`` with the same ``(n, |Sigma|)``; use
    :func:`table_lookup` to query it.
    """
    _guard(n, k)
    total: dict[int, int] = {}
    for block in _label_chunks(n, k):
        keys, freq = np.unique(_pair_count_keys(block, n, k), return_counts=True)
        for key, c in zip(keys.tolist(), freq.tolist()):
            total[key] = total.get(key, 0) + c
    return total


@lru_cache(maxsize=None)
def brute_force_fixed_R_tables(n: int, k: int) -> tuple[dict[int, int], ...]:
    """Per-``R`` histograms ``{encoded pair counts: #sigma}``, one per ``R`` in ``Sigma^n``.

    ``R`` is enumerated in lexicographic order (``itertools.product``).
    """
    _guard(n, k)
    out = []
    for block in _label_chunks(n, k):
        for row in _pair_count_keys(block, n, k):
            keys, freq = np.unique(row, return_counts=True)
            out.append(dict(zip(keys.tolist(), freq.tolist())))
    return tuple(out)


def table_lookup(table: dict[int, int], eta: PairMeasure, n: int) -> int:
    return table.get(_encode(eta.grid_counts(n), n), 0)


def equal_marginal_counts(n: int, k: int) -> Iterator[np.ndarray]:
    """Every ``k x k`` nonnegative integer matrix with total ``n`` and equal marginals."""
    cells = k * k
    for bars in itertools.combinations(range(n + cells - 1), cells - 1):
        edges = (-1,) + bars + (n + cells - 1,)
        c = np.diff(edges) - 1
        mat = np.asarray(c, dtype=np.int64).reshape(k, k)
        if _marginals_equal(mat):
            yield mat


def rounding_threshold(sigma_size: int, n: int) -> float:
    return 2.0 * sigma_size**2 / n


def _floor_n(n: int, x) -> np.ndarray:
    # tolerance guards values such as 0.29 * 100 = 28.999999999999996
    return np.floor(n * np.asarray(x) + GRID_TOL).astype(np.int64)


def round_pair_measure(
    eta: PairMeasure,
    n: int,
    anchor: tuple[int, int] | None = None,
    check_hypothesis: bool = True,
) -> PairMeasure:
    """Round an equal-marginal ``eta`` onto the ``(1/n)``-grid keeping marginals equal.

    All entries away from the anchor row ``r0`` and column ``s0`` are
    floored; the anchor column, then the anchor row, then ``(r0, r0)`` are
    filled so that the row sums equal ``floor(n etabar)``, and ``(r0, s0)``
    absorbs the remainder.

    Parameters
    ----------
    eta : PairMeasure
        Equal marginals required.
    n : int
    anchor : (int, int), optional
        Off-diagonal pair ``(r0, s0)``.  By default the lexicographically
        smallest off-diagonal pair with ``eta >= 2 |Sigma|^2 / n``.
    check_hypothesis : bool
        When False an explicitly given anchor is used even if it is below the
        threshold; the result is still rejected if any entry is negative.

    Returns
    -------
    PairMeasure
        Carries integer ``counts`` with ``counts.sum() == n``.
    """
    k = eta.sigma_size
    if k < 2:
        raise PreconditionError("rounding needs |Sigma| >= 2 for an off-diagonal anchor")
    if eta.marginal_gap() > 1e-10:
        raise PreconditionError("eta must have equal marginals")
    thresh = rounding_threshold(k, n)
    if anchor is None:
        admissible = [(r, s) for r in range(k) for s in range(k)
                      if r != s and eta.entries[r, s] >= thresh]
        if not admissible:
            raise PreconditionError(
                f"no off-diagonal pair (r0, s0) with eta(r0, s0) >= 2|Sigma|^2/n = {thresh:g}; "
                "the rounding construction requires one"
            )
        anchor = admissible[0]
    r0, s0 = int(anchor[0]), int(anchor[1])
    if r0 == s0:
        raise PreconditionError("the anchor (r0, s0) must be off-diagonal")
    if check_hypothesis and eta.entries[r0, s0] < thresh:
        raise PreconditionError(
            f"eta({r0},{s0}) = {eta.entries[r0, s0]:g} < 2|Sigma|^2/n = {thresh:g}"
        )

    e = eta.entries
    bar = eta.first_marginal
    fbar = _floor_n(n, bar)
    c = np.zeros((k, k), dtype=np.int64)
    others_r = [r for r in range(k) if r != r0]
    for r in others_r:
        for s in range(k):
            if s != s0:
                c[r, s] = _floor_n(n, e[r, s])
    for r in others_r:
        c[r, s0] = fbar[r] - sum(c[r, s] for s in range(k) if s != s0)
    for s in range(k):
        if s not in (r0, s0):
            c[r0, s] = fbar[s] - sum(c[r, s] for r in others_r)
    c[r0, r0] = n - sum(fbar[r] for r in others_r) - sum(c[r, r0] for r in others_r)
    c[r0, s0] = 0
    c[r0, s0] = n - c.sum()
    if np.any(c < 0):
        raise PreconditionError(
            f"anchor ({r0},{s0}) is too small for n={n}: rounding produced a negative entry"
        )
    return PairMeasure.from_counts(c, n)


class StirlingSandwich(NamedTuple):
    ratio: float
    lower: float
    upper: float

    @property
    def holds(self) -> bool:
        return self.lower <= self.ratio <= self.upper


#: constant in the upper bound ``n! <= sqrt(C n) (n/e)^n``
STIRLING_C = 2.0 * math.pi * math.e**2


def stirling_sandwich(n: int) -> StirlingSandwich:
    """``n! / ((n/e)^n sqrt(2 pi n))`` with the bounds ``[1, sqrt(C / 2 pi)]``.

    With ``C = 2 pi e^2`` the upper bound is ``e``.
    """
    if n < 1:
        raise DomainError("n must be at least 1")
    log_ratio = math.lgamma(n + 1) - n * (math.log(n) - 1.0) - 0.5 * math.log(2.0 * math.pi * n)
    return StirlingSandwich(math.exp(log_ratio), 1.0, math.sqrt(STIRLING_C / (2.0 * math.pi)))
