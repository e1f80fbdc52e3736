"""
Picard iteration on the lattice: each iterate solves the linear backward
equation with the driver frozen at the previous iterate.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from core.errors import ContractionError, InputError, PicardNonConvergenceWarning
from schemes.generators import Generator, TerminalCondition
from schemes.lattice_solver import (
    DiscreteSolution,
    LatticeLayout,
    build_layout,
    lattice_conditional_z,
    terminal_values,
)
from schemes.paths import Lattice
from schemes.stopping import StoppingRule

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PicardIterate:
    p: int
    layout: LatticeLayout
    y: np.ndarray
    z: np.ndarray

    @classmethod
    def zero(cls, layout: LatticeLayout) -> "PicardIterate":
        blank = np.where(layout.reachable, 0.0, np.nan)
        return cls(p=0, layout=layout, y=blank, z=blank.copy())

    @property
    def y0(self) -> float:
        return float(self.y[0, self.layout.col(0)])

    def gap(self, other: "PicardIterate | DiscreteSolution") -> float:
        """sup over reachable nodes of |y - other.y|."""
        mask = self.layout.reachable
        return float(np.max(np.abs(self.y[mask] - other.y[mask])))

    def z_gap(self, other: "PicardIterate | DiscreteSolution") -> float:
        mask = self.layout.reachable
        return float(np.max(np.abs(self.z[mask] - other.z[mask])))


def _frozen_drift(prev: PicardIterate, gen: Generator, k: int, c: np.ndarray) -> np.ndarray:
    n = prev.layout.n
    return np.asarray(gen.eval(np.full(c.size, k / n), prev.y[k, c], prev.z[k, c])) / n


def picard_step(prev: PicardIterate, gen: Generator, terminal: TerminalCondition,
                rule: StoppingRule) -> PicardIterate:
    """
    Next iterate: explicit backward recursion with f evaluated at prev's (y, z).

    Exit nodes carry xi and z = 0 from the first iterate on.
    """
    layout = prev.layout
    if rule != layout.rule:
        raise InputError("previous iterate lives on a lattice built for another stopping rule")
    n = layout.n
    xi = terminal_values(layout, terminal)
    y = np.where(layout.exit, xi, np.nan)
    z = np.where(layout.reachable, 0.0, np.nan)
    for k in range(layout.cap_steps - 1, -1, -1):
        c = np.flatnonzero(layout.active[k])
        if c.size == 0:
            continue
        y_up, y_down = y[k + 1, c + 1], y[k + 1, c - 1]
        z[k, c] = lattice_conditional_z(y_up, y_down, n)
        y[k, c] = (y_up + y_down) / 2.0 + _frozen_drift(prev, gen, k, c)
    return PicardIterate(p=prev.p + 1, layout=layout, y=y, z=z)


def picard_solve(lattice: Lattice, gen: Generator, terminal: TerminalCondition, rule: StoppingRule,
                 p_max: int = 60, tol: float = 1e-12) -> tuple[PicardIterate, int]:
    """
    Iterate until the sup-node change of y drops below tol.

    Args:
        lattice: lattice giving n and the available depth
        gen: driver
        terminal: xi
        rule: stopping rule
        p_max: iteration budget
        tol: stopping threshold on sup |y^{p+1} - y^p|

    Returns:
        (iterate, iterations_used) where iterations_used is the first p whose
        successor moved by less than tol; the returned iterate is that p-th one.
        On budget exhaustion a PicardNonConvergenceWarning carries the last gap.
    """
    if gen.K / lattice.n >= 1:
        raise ContractionError(f"n = {lattice.n} must exceed the Lipschitz constant K = {gen.K}")
    if p_max < 1 or not tol > 0:
        raise InputError(f"p_max must be >= 1 and tol > 0, got {p_max}, {tol}")
    current = PicardIterate.zero(build_layout(lattice, rule))
    gap = float("inf")
    while current.p < p_max:
        following = picard_step(current, gen, terminal, rule)
        gap = following.gap(current)
        if gap < tol:
            logger.debug("picard converged at p=%d (gap %.3g)", current.p, gap)
            return current, current.p
        current = following
    warnings.warn(
        f"Picard iteration stopped at p_max={p_max} with sup-node gap {gap:.3g} (tol {tol:g})",
        PicardNonConvergenceWarning,
        stacklevel=2,
    )
    return current, p_max


def picard_trajectory(lattice: Lattice, gen: Generator, terminal: TerminalCondition, rule: StoppingRule,
                      reference: DiscreteSolution, p_max: int) -> list[float]:
    """sup-node gap |y^p - reference.y| for p = 1..p_max."""
    current = PicardIterate.zero(build_layout(lattice, rule))
    gaps = []
    for _ in range(p_max):
        current = picard_step(current, gen, terminal, rule)
        gaps.append(current.gap(reference))
    return gaps


def picard_martingale_residual(following: PicardIterate, prev: PicardIterate, gen: Generator) -> float:
    """
    Child-average defect of y^{p+1} + sum of f(y^p, z^p)/n on active nodes.

    The driver is recomputed from prev, so this checks picard_step independently.
    """
    if following.p != prev.p + 1 or following.layout is not prev.layout:
        raise InputError("iterates must be consecutive and share one lattice")
    layout = following.layout
    worst = 0.0
    for k in range(layout.cap_steps):
        c = np.flatnonzero(layout.active[k])
        if c.size == 0:
            continue
        mean = (following.y[k + 1, c + 1] + following.y[k + 1, c - 1]) / 2.0
        res = following.y[k, c] - mean - _frozen_drift(prev, gen, k, c)
        worst = max(worst, float(np.max(np.abs(res))))
    return worst
