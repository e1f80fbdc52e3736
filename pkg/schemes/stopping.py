"""
First-passage stopping rules on lattices and on discretized paths.

Barriers use a strict inequality: a path stops at the first time it is
strictly beyond the barrier, never when it sits exactly on it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from core.errors import DomainError, InputError, InsufficientPathError
from schemes.paths import FinePath, PathBatch, WalkPath, clock_steps, grid_indices

logger = logging.getLogger(__name__)


def aligned_barrier(a: float, n: int) -> float:
    """(floor(a sqrt(n)) + 1/2) / sqrt(n): halfway between two lattice levels."""
    if math.isinf(a):
        return math.inf
    root = math.sqrt(n)
    return (math.floor(a * root) + 0.5) / root


@dataclass(frozen=True)
class StoppingRule:
    barrier_a: float
    barrier_an: float
    cap: float
    two_sided: bool = True

    def __post_init__(self):
        if not self.barrier_a > 0:
            raise DomainError(f"barrier a must be > 0, got {self.barrier_a}")
        if not self.barrier_an > 0:
            raise DomainError(f"barrier a^n must be > 0, got {self.barrier_an}")
        if not (self.cap > 0 and math.isfinite(self.cap)):
            raise DomainError(f"cap must be a positive finite time, got {self.cap}")

    @classmethod
    def aligned(cls, a: float, n: int, cap: float, two_sided: bool = True) -> "StoppingRule":
        return cls(barrier_a=a, barrier_an=aligned_barrier(a, n), cap=cap, two_sided=two_sided)

    @classmethod
    def unbounded(cls, cap: float) -> "StoppingRule":
        """No barrier: tau is the cap."""
        return cls(barrier_a=math.inf, barrier_an=math.inf, cap=cap)

    @property
    def has_barrier(self) -> bool:
        return math.isfinite(self.barrier_an)

    def exit_level(self, n: int) -> int | None:
        """Smallest lattice index j with j / sqrt(n) > a^n, or None without a barrier."""
        if not self.has_barrier:
            return None
        root = math.sqrt(n)
        m = math.floor(self.barrier_an * root) + 1
        while m > 1 and (m - 1) / root > self.barrier_an:
            m -= 1
        while m / root <= self.barrier_an:
            m += 1
        return m

    def cap_steps(self, n: int) -> int:
        steps = clock_steps(self.cap, n)
        if steps < 1:
            raise DomainError(f"cap {self.cap} is shorter than one step of size 1/{n}")
        return steps

    def beyond(self, x):
        """True where x is strictly beyond the barrier."""
        x = np.asarray(x, dtype=float)
        return (np.abs(x) if self.two_sided else x) > self.barrier_an


@dataclass(frozen=True)
class StoppingSample:
    tau: float
    exit_index: tuple[int, int] | int
    capped: bool
    exit_value: float = 0.0
    # (seed, index) of the sampled path
    path_id: tuple | None = None


def first_passage_functional(grid, x, a_n: float, cap_n: float) -> float:
    """
    inf{t in (0, cap_n] : x(t) > a_n} ^ cap_n over a path sampled on a grid.

    Args:
        grid: increasing sample times including 0
        x: path values on the grid
        a_n: barrier (strict inequality)
        cap_n: cap

    Returns:
        first grid time beyond the barrier, or cap_n
    """
    grid = np.asarray(grid, dtype=float)
    x = np.asarray(x, dtype=float)
    if grid.size == 0:
        raise DomainError("empty grid")
    if grid.shape != x.shape:
        raise InputError("grid and path values must have the same shape")
    if not cap_n > 0:
        raise DomainError(f"cap must be > 0, got {cap_n}")
    hits = np.flatnonzero((grid > 0) & (grid <= cap_n) & (x > a_n))
    return float(grid[hits[0]]) if hits.size else float(cap_n)


def hitting_time_lattice(walk: WalkPath, rule: StoppingRule) -> StoppingSample:
    n = walk.params.n
    steps = rule.cap_steps(n)
    if steps > walk.increments.size:
        raise InsufficientPathError(
            f"cap {rule.cap} needs {steps} steps, the walk has {walk.increments.size}"
        )
    sums = walk.partial_sums[1:steps + 1]
    m = rule.exit_level(n)
    if m is None:
        hits = np.empty(0, dtype=np.int64)
    else:
        hits = np.flatnonzero((np.abs(sums) if rule.two_sided else sums) >= m)
    if hits.size:
        k, capped = int(hits[0]) + 1, False
    else:
        k, capped = steps, True
    j = int(walk.partial_sums[k])
    return StoppingSample(tau=k / n, exit_index=(k, j), capped=capped, exit_value=j / math.sqrt(n),
                          path_id=(walk.params.seed, walk.index))


def lattice_exit_steps(increments: np.ndarray, n: int, rule: StoppingRule) -> tuple[np.ndarray, np.ndarray]:
    """
    Exit step and exit index j for every row of an increment matrix.

    Returns:
        (steps, j) integer arrays; steps equals cap_steps on capped rows
    """
    steps = rule.cap_steps(n)
    inc = np.atleast_2d(increments)
    if inc.shape[1] < steps:
        raise InsufficientPathError(f"cap {rule.cap} needs {steps} steps, paths have {inc.shape[1]}")
    sums = np.cumsum(inc[:, :steps], axis=1, dtype=np.int64)
    exit_steps = np.full(inc.shape[0], steps, dtype=np.int64)
    m = rule.exit_level(n)
    if m is not None:
        hit = (np.abs(sums) if rule.two_sided else sums) >= m
        any_hit = hit.any(axis=1)
        exit_steps[any_hit] = np.argmax(hit[any_hit], axis=1) + 1
    j = sums[np.arange(inc.shape[0]), exit_steps - 1]
    return exit_steps, j


def _discrete_hit(times: np.ndarray, values: np.ndarray, rule: StoppingRule):
    live = (times > 0) & (times <= rule.cap)
    hits = np.flatnonzero(live & rule.beyond(values))
    return hits, np.flatnonzero(times <= rule.cap)


def hitting_time_discretized(path: FinePath, subdivision, rule: StoppingRule) -> StoppingSample:
    """tau^n for the path observed on a subdivision; exit_index is the fine-grid index."""
    sub = np.atleast_1d(np.asarray(subdivision, dtype=float))
    if rule.cap > path.horizon + 1e-12:
        raise InsufficientPathError(f"cap {rule.cap} exceeds the path horizon {path.horizon}")
    idx = grid_indices(path.grid, sub)
    values = path.values[idx]
    hits, upto_cap = _discrete_hit(sub, values, rule)
    if hits.size:
        first = int(hits[0])
        return StoppingSample(tau=float(sub[first]), exit_index=int(idx[first]), capped=False,
                              exit_value=float(values[first]), path_id=(path.seed, path.index))
    last = int(upto_cap[-1])
    return StoppingSample(tau=float(rule.cap), exit_index=int(idx[last]), capped=True,
                          exit_value=float(values[last]), path_id=(path.seed, path.index))


def batch_exit_steps(batch: PathBatch, rule: StoppingRule) -> tuple[np.ndarray, np.ndarray, int]:
    """
    Exit step per path of a batch observed on its own grid.

    Returns:
        (exit_steps, capped, cap_index) where cap_index is the last grid index <= cap
    """
    if rule.cap > batch.grid[-1] + 1e-12:
        raise InsufficientPathError(f"cap {rule.cap} exceeds the batch horizon {batch.grid[-1]}")
    cap_index = int(np.searchsorted(batch.grid, rule.cap + 1e-12, side="right") - 1)
    if cap_index == 0:
        return np.zeros(batch.count, dtype=np.int64), np.ones(batch.count, dtype=bool), 0
    window = batch.values[:, 1:cap_index + 1]
    hit = rule.beyond(window)
    capped = ~hit.any(axis=1)
    exit_steps = np.where(capped, cap_index, np.argmax(hit, axis=1) + 1)
    return exit_steps.astype(np.int64), capped, cap_index


@dataclass(frozen=True)
class MonotoneLimitReport:
    monotone_fraction: float
    mean_gaps: tuple[float, ...]
    path_count: int

    @property
    def gaps_decreasing(self) -> bool:
        return all(b < a for a, b in zip(self.mean_gaps, self.mean_gaps[1:]))


def monotone_limit_check(samples: Sequence[Sequence[StoppingSample]],
                         fine: Sequence[StoppingSample]) -> MonotoneLimitReport:
    """
    Share of paths whose tau^n is nonincreasing along the levels, and mean |tau^n - tau_fine| per level.

    Args:
        samples: one sequence of samples per refinement level, same paths in the same order;
            path ids must match the fine samples position by position
        fine: samples of the undiscretized paths

    Returns:
        MonotoneLimitReport
    """
    if not samples:
        raise InputError("no refinement levels")
    counts = {len(level) for level in samples} | {len(fine)}
    if len(counts) != 1 or 0 in counts:
        raise InputError(f"levels and fine samples must cover the same nonempty path set, got sizes {sorted(counts)}")
    fine_ids = [s.path_id for s in fine]
    for number, level in enumerate(samples):
        stray = next((i for i, s in enumerate(level) if s.path_id != fine_ids[i]), None)
        if stray is not None:
            raise InputError(f"level {number} position {stray} samples path {level[stray].path_id}, "
                             f"the fine samples have {fine_ids[stray]}")
    taus = np.array([[s.tau for s in level] for level in samples])
    fine_tau = np.array([s.tau for s in fine])
    monotone = np.all(np.diff(taus, axis=0) <= 0, axis=0)
    gaps = tuple(float(np.mean(np.abs(row - fine_tau))) for row in taus)
    report = MonotoneLimitReport(monotone_fraction=float(np.mean(monotone)), mean_gaps=gaps,
                                 path_count=int(fine_tau.size))
    logger.info("monotone fraction %.4f over %d paths, gaps %s", report.monotone_fraction,
                report.path_count, ", ".join(f"{g:.4g}" for g in gaps))
    return report
