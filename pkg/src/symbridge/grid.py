"""Geometry: the Dirichlet box grid, functions on it, and box partitions."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError

MAX_DIM = 3


def _as_tuple(value, dim: int | None = None, cast=float) -> tuple:
    arr = np.atleast_1d(np.asarray(value))
    if dim is not None and arr.size == 1 and dim > 1:
        arr = np.repeat(arr, dim)
    return tuple(cast(v) for v in arr)


@dataclass(frozen=True)
class Grid:
    """Uniform interior grid of the closed box ``[lo, hi]``.

    Axis ``a`` carries ``n[a]`` interior nodes at ``lo[a] + i*h[a]`` for
    ``i = 1..n[a]`` with ``h[a] = (hi[a] - lo[a]) / (n[a] + 1)``.  Grid
    functions are implicitly zero on the boundary layer (Dirichlet).
    Flattening is row-major (C order) over the axes.
    """

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    n: tuple[int, ...]

    def __post_init__(self):
        if not (len(self.lo) == len(self.hi) == len(self.n)):
            raise ConfigError("lo, hi and n must have one entry per axis")
        if not 1 <= len(self.lo) <= MAX_DIM:
            raise ConfigError(f"dimension must be between 1 and {MAX_DIM}")
        if any(k < 1 for k in self.n):
            raise ConfigError("every axis needs at least one interior node")
        if any(b <= a for a, b in zip(self.lo, self.hi)):
            raise ConfigError("box must satisfy lo < hi on every axis")

    @classmethod
    def box(cls, lo, hi, n, dim: int | None = None) -> "Grid":
        """Build a grid, broadcasting scalar ``lo``/``hi``/``n`` to ``dim`` axes."""
        if dim is None:
            dim = max(np.size(lo), np.size(hi), np.size(n))
        return cls(_as_tuple(lo, dim), _as_tuple(hi, dim), _as_tuple(n, dim, int))

    @property
    def dim(self) -> int:
        return len(self.n)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.n

    @property
    def size(self) -> int:
        return int(np.prod(self.n))

    @cached_property
    def h(self) -> np.ndarray:
        return (np.asarray(self.hi) - np.asarray(self.lo)) / (np.asarray(self.n) + 1)

    @property
    def cell_volume(self) -> float:
        """The quadrature weight ``h^d`` attached to each node."""
        return float(np.prod(self.h))

    @property
    def lengths(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)

    def axis(self, a: int) -> np.ndarray:
        return self.lo[a] + self.h[a] * np.arange(1, self.n[a] + 1)

    @cached_property
    def points(self) -> np.ndarray:
        """Interior nodes as a ``(size, dim)`` array in row-major order."""
        mesh = np.meshgrid(*[self.axis(a) for a in range(self.dim)], indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def contains(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.all((x >= np.asarray(self.lo)) & (x <= np.asarray(self.hi)), axis=1)

    def node_index(self, x) -> np.ndarray:
        """Flat index of the node whose cell contains each point.

        Cells are ``[x_i - h/2, x_i + h/2)``; the two boundary strips of width
        ``h/2`` are attached to the first and last node.  Points outside the
        box get ``-1``.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        idx = np.zeros(len(x), dtype=np.int64)
        for a in range(self.dim):
            i = np.floor((x[:, a] - self.lo[a]) / self.h[a] - 0.5).astype(np.int64)
            i = np.clip(i, 0, self.n[a] - 1)
            idx = idx * self.n[a] + i
        idx[~self.contains(x)] = -1
        return idx

    def boundary_layer(self) -> np.ndarray:
        """Boolean mask of nodes adjacent to the boundary."""
        mask = np.zeros(self.n, dtype=bool)
        for a in range(self.dim):
            sl = [slice(None)] * self.dim
            sl[a] = 0
            mask[tuple(sl)] = True
            sl[a] = -1
            mask[tuple(sl)] = True
        return mask.ravel()

    def to_dict(self) -> dict:
        return {"dim": self.dim, "lo": list(self.lo), "hi": list(self.hi), "n": list(self.n)}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        try:
            dim = int(d.get("dim", max(np.size(d["lo"]), np.size(d["n"]))))
            return cls.box(d["lo"], d["hi"], d["n"], dim=dim)
        except KeyError as exc:
            raise ConfigError(f"grid.{exc.args[0]}: missing field") from None


@dataclass(frozen=True)
class GridFunction:
    """Real values on the interior nodes of a grid (row-major)."""

    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        if values.size != self.grid.size:
            raise ConfigError(
                f"expected {self.grid.size} values for the grid, got {values.size}"
            )
        object.__setattr__(self, "values", values)

    @classmethod
    def from_callable(cls, grid: Grid, func) -> "GridFunction":
        pts = grid.points
        return cls(grid, np.asarray(func(*pts.T), dtype=float) * np.ones(grid.size))

    @classmethod
    def constant(cls, grid: Grid, c: float = 0.0) -> "GridFunction":
        return cls(grid, np.full(grid.size, float(c)))

    def integral(self) -> float:
        return float(self.values.sum() * self.grid.cell_volume)

    def inner(self, other) -> float:
        return float(np.dot(self.values, values_of(other, self.grid)) * self.grid.cell_volume)

    def to_dict(self) -> dict:
        return {"grid": self.grid.to_dict(), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GridFunction":
        if "grid" not in d or "values" not in d:
            raise ConfigError("grid function JSON needs 'grid' and 'values'")
        return cls(Grid.from_dict(d["grid"]), np.asarray(d["values"], dtype=float))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "GridFunction":
        return cls.from_dict(json.loads(Path(path).read_text()))


class DensityOnGrid(GridFunction):
    """Nonnegative grid function integrating to one with weight ``h^d``."""

    def __post_init__(self):
        super().__post_init__()
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise DomainError("density must be finite and nonnegative")
        total = self.integral()
        if abs(total - 1.0) > 1e-10:
            raise DomainError(f"density integrates to {total!r}, expected 1")

    @classmethod
    def normalized(cls, grid: Grid, values) -> "DensityOnGrid":
        values = np.clip(np.asarray(values, dtype=float).ravel(), 0.0, None)
        total = values.sum() * grid.cell_volume
        if not total > 0:
            raise DomainError("density has no mass")
        return cls(grid, values / total)

    @classmethod
    def ground_state(cls, grid: Grid) -> "DensityOnGrid":
        """The Dirichlet ground-state density ``prod_a (2/L_a) sin^2(pi (x_a-lo_a)/L_a)``."""
        pts = grid.points
        vals = np.ones(grid.size)
        for a in range(grid.dim):
            L = grid.lengths[a]
            vals *= (2.0 / L) * np.sin(np.pi * (pts[:, a] - grid.lo[a]) / L) ** 2
        return cls.normalized(grid, vals)


def values_of(f, grid: Grid) -> np.ndarray:
    """Raw values of ``f`` (GridFunction, scalar or array) on ``grid``."""
    if isinstance(f, GridFunction):
        if f.grid != grid:
            raise ConfigError("grid function lives on a different grid")
        return f.values
    arr = np.asarray(f, dtype=float)
    if arr.ndim == 0:
        return np.full(grid.size, float(arr))
    arr = arr.ravel()
    if arr.size != grid.size:
        raise ConfigError(f"expected {grid.size} values for the grid, got {arr.size}")
    return arr


@dataclass(frozen=True)
class Partition:
    """Product-of-intervals partition ``{U_r}`` of a box with cell weights.

    Cells are half-open ``[e_k, e_{k+1})`` along each axis except the last
    cell of an axis, which is closed.  Cell labels are row-major over the
    per-axis cell indices.  ``weights[r]`` is the normalised mass
    ``m(U_r)/m(box)`` of the initial measure.
    """

    edges: tuple[np.ndarray, ...]
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        edges = tuple(np.asarray(e, dtype=float) for e in self.edges)
        for e in edges:
            if e.ndim != 1 or e.size < 2 or np.any(np.diff(e) <= 0):
                raise ConfigError("partition edges must be strictly increasing")
        object.__setattr__(self, "edges", edges)
        w = np.asarray(self.weights, dtype=float).ravel()
        if w.size != int(np.prod([e.size - 1 for e in edges])):
            raise ConfigError("one weight per cell is required")
        if np.any(w <= 0):
            raise ConfigError("every cell must carry positive weight m(r) > 0")
        object.__setattr__(self, "weights", w / w.sum())

    @classmethod
    def uniform(cls, lo, hi, counts, weights=None) -> "Partition":
        """Equal-size cells; weights default to volume fractions (uniform ``m``)."""
        dim = max(np.size(lo), np.size(hi), np.size(counts))
        lo, hi, counts = _as_tuple(lo, dim), _as_tuple(hi, dim), _as_tuple(counts, dim, int)
        edges = tuple(np.linspace(a, b, k + 1) for a, b, k in zip(lo, hi, counts))
        part = cls(edges, np.ones(int(np.prod(counts))))
        if weights is None:
            return part
        return cls(edges, weights)

    @classmethod
    def from_grid(cls, grid: Grid, block=1) -> "Partition":
        """Cells made of ``block`` consecutive grid nodes per axis.

        Edges sit half-way between nodes, the outermost at the box walls,
        so every grid node lies strictly inside exactly one cell.
        """
        block = _as_tuple(block, grid.dim, int)
        edges = []
        for a in range(grid.dim):
            nb = -(-grid.n[a] // block[a])
            inner = grid.lo[a] + (np.arange(1, nb) * block[a] + 0.5) * grid.h[a]
            edges.append(np.concatenate([[grid.lo[a]], inner, [grid.hi[a]]]))
        part = cls(tuple(edges), np.ones(int(np.prod([len(e) - 1 for e in edges]))))
        return cls(part.edges, part.volumes)

    @property
    def dim(self) -> int:
        return len(self.edges)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(e.size - 1 for e in self.edges)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def lo(self) -> np.ndarray:
        return np.array([e[0] for e in self.edges])

    @property
    def hi(self) -> np.ndarray:
        return np.array([e[-1] for e in self.edges])

    @cached_property
    def volumes(self) -> np.ndarray:
        widths = np.meshgrid(*[np.diff(e) for e in self.edges], indexing="ij")
        return np.prod(np.stack([w.ravel() for w in widths]), axis=0)

    @property
    def fineness(self) -> float:
        widths = np.meshgrid(*[np.diff(e) for e in self.edges], indexing="ij")
        return float(np.sqrt(sum(w.ravel() ** 2 for w in widths)).max())

    def bounds(self, r: int) -> tuple[np.ndarray, np.ndarray]:
        idx = np.unravel_index(int(r), self.shape)
        lo = np.array([e[i] for e, i in zip(self.edges, idx)])
        hi = np.array([e[i + 1] for e, i in zip(self.edges, idx)])
        return lo, hi

    def labels(self, x) -> np.ndarray:
        """Cell label of each point; ``-1`` for points outside the box."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.dim:
            raise ConfigError("point dimension does not match partition")
        lab = np.zeros(len(x), dtype=np.int64)
        inside = np.ones(len(x), dtype=bool)
        for a, e in enumerate(self.edges):
            xa = x[:, a]
            inside &= (xa >= e[0]) & (xa <= e[-1])
            k = np.searchsorted(e, xa, side="right") - 1
            k = np.clip(k, 0, e.size - 2)
            lab = lab * (e.size - 1) + k
        lab[~inside] = -1
        return lab

    def grid_labels(self, grid: Grid) -> np.ndarray:
        return self.labels(grid.points)

    def to_dict(self) -> dict:
        return {"edges": [e.tolist() for e in self.edges], "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Partition":
        if "edges" in d:
            return cls(tuple(np.asarray(e) for e in d["edges"]), d.get("weights", None)
                       or np.ones(int(np.prod([len(e) - 1 for e in d["edges"]]))))
        try:
            return cls.uniform(d["lo"], d["hi"], d["cells"], d.get("weights"))
        except KeyError as exc:
            raise ConfigError(f"partition.{exc.args[0]}: missing field") from None

