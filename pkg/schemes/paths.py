"""
Scaled random walks, Brownian paths on a fine grid, discretized Brownian
martingales, and their clocks and brackets.

Every path is keyed by (seed, index): path i of a batch is the same array no
matter how many other paths are drawn alongside it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from core.config import Config
from core.errors import AlignmentError, DomainError, InputError, PathSizeError

logger = logging.getLogger(__name__)

_SEED_LIMIT = 2**64


def path_rng(seed: int, index: int = 0) -> np.random.Generator:
    """
    Independent generator for path `index` of the batch keyed by `seed`.

    Args:
        seed: 64-bit batch seed
        index: path index inside the batch

    Returns:
        numpy Generator seeded from SeedSequence(seed, spawn_key=(index,))
    """
    if not 0 <= int(seed) < _SEED_LIMIT:
        raise DomainError(f"seed must be a 64-bit unsigned integer, got {seed}")
    if index < 0:
        raise DomainError(f"path index must be >= 0, got {index}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(index),))))


def clock_steps(t, n: int):
    """
    Integer part of n*t, corrected so that steps/n <= t < (steps+1)/n holds in floating point.
    Accepts scalars or arrays.
    """
    t_arr = np.asarray(t, dtype=float)
    if np.any(np.isnan(t_arr)) or np.any(t_arr < 0):
        raise DomainError(f"clock argument must be >= 0, got {t}")
    k = np.floor(n * t_arr)
    k = np.where((k + 1) / n <= t_arr, k + 1, k)
    k = np.where(k / n > t_arr, k - 1, k)
    k = k.astype(np.int64)
    return int(k) if k.ndim == 0 else k


def clock_An(t, n: int):
    """A^n_t = floor(n t) / n."""
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    return clock_steps(t, n) / n


@dataclass(frozen=True)
class WalkParams:
    n: int
    horizon_T: int
    seed: int = 0

    def __post_init__(self):
        if int(self.n) < 1:
            raise DomainError(f"n must be >= 1, got {self.n}")
        if int(self.horizon_T) < 1:
            raise DomainError(f"horizon_T must be >= 1, got {self.horizon_T}")
        if not 0 <= int(self.seed) < _SEED_LIMIT:
            raise DomainError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if int(self.n) * int(self.horizon_T) > Config.MAX_STEPS:
            raise PathSizeError(
                f"n*horizon_T = {int(self.n) * int(self.horizon_T)} exceeds the step limit {Config.MAX_STEPS}"
            )

    @property
    def steps(self) -> int:
        return int(self.n) * int(self.horizon_T)


@dataclass(frozen=True)
class WalkPath:
    params: WalkParams
    increments: np.ndarray
    index: int = 0

    @cached_property
    def partial_sums(self) -> np.ndarray:
        # integer positions j_k; values are j_k / sqrt(n)
        out = np.zeros(self.increments.size + 1, dtype=np.int64)
        np.cumsum(self.increments, out=out[1:])
        return out

    @cached_property
    def values(self) -> np.ndarray:
        return self.partial_sums / math.sqrt(self.params.n)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.increments.size + 1) / self.params.n


def _check_increments(increments, steps: int) -> np.ndarray:
    inc = np.asarray(increments)
    if inc.shape[-1] != steps:
        raise InputError(f"expected {steps} increments, got {inc.shape[-1]}")
    if not np.all(np.abs(inc) == 1):
        raise InputError("increments must be +1 or -1")
    return inc.astype(np.int8)


def draw_increments(seed: int, index: int, steps: int) -> np.ndarray:
    rng = path_rng(seed, index)
    return (2 * rng.integers(0, 2, size=steps, dtype=np.int8) - 1).astype(np.int8)


def build_walk(params: WalkParams, index: int = 0, increments: Sequence[int] | None = None) -> WalkPath:
    """
    Build path `index` of the walk batch keyed by params.seed.

    Args:
        params: scale, horizon and seed
        index: path index inside the batch
        increments: forced +-1 sequence (stub source); drawn from the seed when omitted

    Returns:
        WalkPath with n*horizon_T steps
    """
    steps = params.steps
    if increments is None:
        inc = draw_increments(params.seed, index, steps)
    else:
        inc = _check_increments(increments, steps)
    inc.setflags(write=False)
    return WalkPath(params=params, increments=inc, index=index)


def walk_batch(params: WalkParams, count: int, start: int = 0) -> np.ndarray:
    """Increments of paths start..start+count-1 as a (count, steps) int8 matrix."""
    if count < 1:
        raise DomainError(f"count must be >= 1, got {count}")
    out = np.empty((count, params.steps), dtype=np.int8)
    for row in range(count):
        out[row] = draw_increments(params.seed, start + row, params.steps)
    return out


def enumerate_increments(steps: int) -> np.ndarray:
    """All 2**steps increment sequences; row i reads the bits of i, most significant first, 0 = up."""
    if steps > Config.ENUM_MAX_STEPS:
        raise PathSizeError(f"cannot enumerate 2**{steps} paths (limit 2**{Config.ENUM_MAX_STEPS})")
    leaves = np.arange(2**steps, dtype=np.int64)
    shifts = np.arange(steps - 1, -1, -1, dtype=np.int64)
    bits = (leaves[:, None] >> shifts[None, :]) & 1
    return (1 - 2 * bits).astype(np.int8)


@dataclass(frozen=True)
class Lattice:
    n: int
    depth: int

    def __post_init__(self):
        if int(self.n) < 1:
            raise DomainError(f"n must be >= 1, got {self.n}")
        if int(self.depth) < 0:
            raise DomainError(f"depth must be >= 0, got {self.depth}")

    def position(self, j):
        out = np.asarray(j, dtype=float) / math.sqrt(self.n)
        return float(out) if out.ndim == 0 else out

    def nodes_at(self, k: int) -> np.ndarray:
        return np.arange(-k, k + 1, 2, dtype=np.int64)

    def node_count(self, k: int) -> int:
        return k + 1

    def contains(self, k: int, j: int) -> bool:
        return 0 <= k <= self.depth and abs(j) <= k and (j + k) % 2 == 0


@dataclass(frozen=True)
class FinePath:
    grid: np.ndarray
    values: np.ndarray
    seed: int | None = None
    index: int = 0
    # set when the path is piecewise constant between these points
    subdivision: np.ndarray | None = None

    def __post_init__(self):
        if self.grid.shape != self.values.shape:
            raise InputError("grid and values must have the same shape")
        if self.grid.size == 0 or self.grid[0] != 0.0:
            raise DomainError("fine grid must start at 0")
        if np.any(np.diff(self.grid) <= 0):
            raise DomainError("fine grid must be strictly increasing")

    @property
    def horizon(self) -> float:
        return float(self.grid[-1])

    def value_at(self, t) -> np.ndarray | float:
        idx = np.searchsorted(self.grid, t, side="right") - 1
        out = self.values[np.clip(idx, 0, None)]
        return float(out) if np.ndim(out) == 0 else out


def uniform_grid(h_fine: float, horizon: float) -> np.ndarray:
    if h_fine <= 0 or horizon <= 0:
        raise DomainError(f"mesh and horizon must be positive, got {h_fine}, {horizon}")
    steps = int(round(horizon / h_fine))
    if steps < 1 or abs(steps * h_fine - horizon) > 1e-9 * max(1.0, horizon):
        raise DomainError(f"horizon {horizon} is not a multiple of the mesh {h_fine}")
    if steps > Config.MAX_STEPS:
        raise PathSizeError(f"{steps} fine steps exceed the step limit {Config.MAX_STEPS}")
    return np.arange(steps + 1) * h_fine


def brownian_on_grid(grid: np.ndarray, seed: int, index: int = 0) -> FinePath:
    grid = np.asarray(grid, dtype=float)
    dt = np.diff(grid)
    if np.any(dt <= 0):
        raise DomainError("grid must be strictly increasing")
    rng = path_rng(seed, index)
    values = np.zeros(grid.size)
    np.cumsum(rng.standard_normal(dt.size) * np.sqrt(dt), out=values[1:])
    return FinePath(grid=grid, values=values, seed=seed, index=index)


def simulate_fine_path(h_fine: float, horizon: float, seed: int, index: int = 0) -> FinePath:
    """Brownian sample on the uniform grid {0, h, 2h, ..., horizon}."""
    return brownian_on_grid(uniform_grid(h_fine, horizon), seed, index)


@dataclass(frozen=True)
class PathBatch:
    """Paths sampled on one shared grid; row i is path start + i of the seed's stream."""

    grid: np.ndarray
    values: np.ndarray
    seed: int | None = None
    start: int = 0

    @property
    def count(self) -> int:
        return int(self.values.shape[0])

    @property
    def steps(self) -> int:
        return int(self.grid.size - 1)

    @property
    def mesh(self) -> float:
        return float(np.max(np.diff(self.grid))) if self.grid.size > 1 else 0.0

    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=1)

    def path(self, row: int) -> FinePath:
        return FinePath(grid=self.grid, values=self.values[row], seed=self.seed, index=self.start + row)


def simulate_batch(h_fine: float, horizon: float, count: int, seed: int, start: int = 0) -> PathBatch:
    grid = uniform_grid(h_fine, horizon)
    values = np.empty((count, grid.size))
    for row in range(count):
        values[row] = brownian_on_grid(grid, seed, start + row).values
    return PathBatch(grid=grid, values=values, seed=seed, start=start)


def grid_indices(grid: np.ndarray, points) -> np.ndarray:
    """Index of each point on the grid; AlignmentError when a point is not a grid time."""
    grid = np.asarray(grid, dtype=float)
    pts = np.atleast_1d(np.asarray(points, dtype=float))
    right = np.clip(np.searchsorted(grid, pts), 0, grid.size - 1)
    left = np.clip(right - 1, 0, grid.size - 1)
    idx = np.where(np.abs(grid[left] - pts) < np.abs(grid[right] - pts), left, right)
    off = np.abs(grid[idx] - pts) > 1e-12 * np.maximum(1.0, np.abs(pts))
    if np.any(off):
        raise AlignmentError(f"subdivision point {pts[np.argmax(off)]} is not on the fine grid")
    return idx


def _check_subdivision(subdivision) -> np.ndarray:
    sub = np.atleast_1d(np.asarray(subdivision, dtype=float))
    if sub.size == 0 or sub[0] != 0.0:
        raise DomainError("subdivision must start at 0")
    if np.any(np.diff(sub) <= 0):
        raise DomainError("subdivision must be strictly increasing")
    return sub


def discretize(path: FinePath, subdivision) -> FinePath:
    """
    Piecewise-constant version of `path` that only moves at subdivision points.

    Args:
        path: fine Brownian sample
        subdivision: increasing times starting at 0, each a point of path.grid

    Returns:
        FinePath on the same grid carrying the subdivision
    """
    sub = _check_subdivision(subdivision)
    idx = grid_indices(path.grid, sub)
    owner = np.searchsorted(sub, path.grid, side="right") - 1
    values = path.values[idx[owner]]
    return FinePath(grid=path.grid, values=values, seed=path.seed, index=path.index, subdivision=sub)


def discretize_batch(batch: PathBatch, subdivision) -> PathBatch:
    """The batch observed at subdivision points only (the jump times of the discretized process)."""
    sub = _check_subdivision(subdivision)
    idx = grid_indices(batch.grid, sub)
    return PathBatch(grid=batch.grid[idx], values=batch.values[:, idx], seed=batch.seed, start=batch.start)


def dyadic_subdivision(level: int, horizon: float) -> np.ndarray:
    """Uniform subdivision of [0, horizon] with mesh 2**-level."""
    return uniform_grid(2.0**-level, horizon)


def bracket(process, t):
    """
    Predictable bracket of the driving martingale at time t.

    Scaled walks (an int n, WalkParams, WalkPath or Lattice) use the clock
    floor(n t)/n. A discretized Brownian path or a PathBatch uses the last
    subdivision point <= t. An undiscretized FinePath returns t.
    """
    t_arr = np.asarray(t, dtype=float)
    if np.any(np.isnan(t_arr)) or np.any(t_arr < 0):
        raise DomainError(f"bracket time must be >= 0, got {t}")
    if isinstance(process, (int, np.integer)):
        return clock_An(t, int(process))
    if isinstance(process, (WalkParams, Lattice)):
        return clock_An(t, process.n)
    if isinstance(process, WalkPath):
        return clock_An(t, process.params.n)
    if isinstance(process, FinePath):
        if process.subdivision is None:
            return float(t_arr) if t_arr.ndim == 0 else t_arr
        points = process.subdivision
    elif isinstance(process, PathBatch):
        points = process.grid
    else:
        points = _check_subdivision(process)
    out = points[np.searchsorted(points, t_arr, side="right") - 1]
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class BracketModulus:
    rho: Callable
    a_n: tuple[float, ...]

    def __post_init__(self):
        if float(self.rho(0.0)) != 0.0:
            raise DomainError("rho(0) must be 0")
        if any(b > a for a, b in zip(self.a_n, self.a_n[1:])):
            raise DomainError("a_n must be nonincreasing")

    @classmethod
    def identity(cls, a_n: Sequence[float]) -> "BracketModulus":
        return cls(rho=lambda d: d, a_n=tuple(float(a) for a in a_n))

    def bound(self, dt, level: int):
        return self.rho(dt) + self.a_n[level]


def modulus_violations(process, s, t, modulus: BracketModulus, level: int, tol: float = 1e-12) -> int:
    """Number of pairs s <= t with bracket(t) - bracket(s) > rho(t - s) + a_n[level]."""
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(s > t):
        raise InputError("pairs must satisfy s <= t")
    gap = np.asarray(bracket(process, t)) - np.asarray(bracket(process, s))
    return int(np.count_nonzero(gap > modulus.bound(t - s, level) + tol))
