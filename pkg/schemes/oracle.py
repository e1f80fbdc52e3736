"""
Independent reference values for the solvers.

- solve_bvp: finite-difference Newton solve of 1/2 u'' + f(u, u') = 0 on (-a, a)
  with u(+-a) = g(+-a); Y = u(W) and Z = u'(W) up to the exit time.
- closed_form_linear: exact u for f = -mu y + c.
- enumerate_lattice_expectation: exhaustive expectation over every increment
  sequence of a small walk.
- expected_exit_steps / exit_time_law: absorption of the walk at a level.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import solve_banded

from core.config import Config
from core.errors import DomainError, InputError, OracleError, PathSizeError
from schemes.generators import Generator, TerminalCondition
from schemes.lattice_solver import NodeSolveConfig, lattice_conditional_z, solve_node_y
from schemes.paths import Lattice, WalkParams, enumerate_increments
from schemes.stopping import StoppingRule, lattice_exit_steps

logger = logging.getLogger(__name__)

FD_STEP = 1e-6


@dataclass(frozen=True)
class ReferenceSolution:
    grid: np.ndarray
    u: np.ndarray
    u_prime: np.ndarray
    a: float
    residual: float = 0.0
    newton_iterations: int = 0

    def value(self, x):
        """u at x; linear extrapolation with the boundary slope outside [-a, a]."""
        return self._interp(x, self.u, self.u_prime)

    def derivative(self, x):
        out = np.interp(np.asarray(x, dtype=float), self.grid, self.u_prime)
        return float(out) if np.ndim(out) == 0 else out

    @property
    def u0(self) -> float:
        return float(self.value(0.0))

    def _interp(self, x, values, slopes):
        x = np.asarray(x, dtype=float)
        out = np.interp(x, self.grid, values)
        out = np.where(x < self.grid[0], values[0] + slopes[0] * (x - self.grid[0]), out)
        out = np.where(x > self.grid[-1], values[-1] + slopes[-1] * (x - self.grid[-1]), out)
        return float(out) if out.ndim == 0 else out


def _boundary_function(g) -> Callable:
    if isinstance(g, TerminalCondition):
        if g.kind == "exit_state_time":
            raise InputError("the elliptic oracle needs a time-independent terminal condition")
        return lambda x: g.evaluate(x)
    return g


def _residual(u: np.ndarray, h: float, gen: Generator) -> np.ndarray:
    inner, slope = u[1:-1], (u[2:] - u[:-2]) / (2.0 * h)
    return u[2:] - 2.0 * inner + u[:-2] + 2.0 * h * h * np.asarray(gen.eval(0.0, inner, slope))


def solve_bvp(gen: Generator, g, a: float, grid_size: int = 2001, tol: float = 1e-10,
              max_newton: int = 50) -> ReferenceSolution:
    """
    Solve 1/2 u'' + f(u, u') = 0 with Dirichlet data by damped Newton.

    The discrete residual is scaled by 2h^2 (second differences plus 2h^2 f), which
    keeps it at round-off level on fine grids.

    Args:
        gen: time-independent driver, evaluated at t = 0
        g: boundary data as a callable or TerminalCondition
        a: half-width of the interval
        grid_size: number of grid points, >= 8
        tol: max-norm threshold on the scaled residual
        max_newton: Newton iteration budget

    Returns:
        ReferenceSolution

    Raises:
        OracleError: Newton did not converge or produced non-finite values
    """
    if not (a > 0 and math.isfinite(a)):
        raise DomainError(f"barrier a must be a positive finite number, got {a}")
    if grid_size < 8:
        raise DomainError(f"grid_size must be >= 8, got {grid_size}")
    boundary = _boundary_function(g)
    grid = np.linspace(-a, a, grid_size)
    h = grid[1] - grid[0]
    left, right = float(boundary(np.float64(-a))), float(boundary(np.float64(a)))
    u = left + (right - left) * (grid + a) / (2 * a)

    res = _residual(u, h, gen)
    norm = float(np.max(np.abs(res)))
    for it in range(1, max_newton + 1):
        inner, slope = u[1:-1], (u[2:] - u[:-2]) / (2.0 * h)
        f_y = (np.asarray(gen.eval(0.0, inner + FD_STEP, slope))
               - np.asarray(gen.eval(0.0, inner - FD_STEP, slope))) / (2 * FD_STEP)
        f_z = (np.asarray(gen.eval(0.0, inner, slope + FD_STEP))
               - np.asarray(gen.eval(0.0, inner, slope - FD_STEP))) / (2 * FD_STEP)
        diag = -2.0 + 2.0 * h * h * f_y
        upper = 1.0 + h * f_z
        lower = 1.0 - h * f_z
        ab = np.zeros((3, inner.size))
        ab[0, 1:] = upper[:-1]
        ab[1] = diag
        ab[2, :-1] = lower[1:]
        try:
            step = solve_banded((1, 1), ab, -res)
        except (np.linalg.LinAlgError, ValueError) as e:
            raise OracleError(f"Newton system is singular at iteration {it}: {e}") from e

        damping = 1.0
        while True:
            trial = u.copy()
            trial[1:-1] += damping * step
            trial_res = _residual(trial, h, gen)
            trial_norm = float(np.max(np.abs(trial_res)))
            if np.isfinite(trial_norm) and (trial_norm <= norm or trial_norm < tol):
                break
            damping /= 2.0
            if damping < 2.0**-20:
                raise OracleError(f"damped Newton stalled at iteration {it} with residual {norm:.3g}")
        previous = norm
        u, res, norm = trial, trial_res, trial_norm
        # below tol, stop once the residual sits at round-off or stops shrinking
        floor = 64 * np.finfo(float).eps * max(1.0, float(np.max(np.abs(u))))
        if norm < tol and (norm <= floor or norm > 0.25 * previous):
            return _reference(grid, u, h, a, norm, it)
    raise OracleError(f"Newton did not converge in {max_newton} iterations (residual {norm:.3g})")


def _reference(grid: np.ndarray, u: np.ndarray, h: float, a: float, residual: float, iterations: int):
    du = np.empty_like(u)
    du[1:-1] = (u[2:] - u[:-2]) / (2 * h)
    du[0] = (-3 * u[0] + 4 * u[1] - u[2]) / (2 * h)
    du[-1] = (3 * u[-1] - 4 * u[-2] + u[-3]) / (2 * h)
    logger.debug("solve_bvp: %d points, %d Newton steps, residual %.3g", grid.size, iterations, residual)
    return ReferenceSolution(grid=grid, u=u, u_prime=du, a=a, residual=residual, newton_iterations=iterations)


def closed_form_linear(mu: float, c: float, a: float, g_left: float = 0.0,
                       g_right: float = 0.0) -> tuple[Callable, Callable]:
    """
    Exact (u, u') for f(y, z) = -mu y + c with u(-a) = g_left, u(a) = g_right.

    mu = 0 gives the quadratic solution of 1/2 u'' = -c.
    """
    if mu < 0:
        raise DomainError(f"mu must be >= 0, got {mu}")
    mean, half = (g_left + g_right) / 2.0, (g_right - g_left) / 2.0
    if mu == 0:
        def u0(x):
            x = np.asarray(x, dtype=float)
            return c * (a * a - x * x) + mean + half * x / a

        def du0(x):
            return -2.0 * c * np.asarray(x, dtype=float) + half / a
        return u0, du0

    k = math.sqrt(2.0 * mu)
    A = (mean - c / mu) / math.cosh(k * a)
    B = half / math.sinh(k * a)

    def u(x):
        x = np.asarray(x, dtype=float)
        return c / mu + A * np.cosh(k * x) + B * np.sinh(k * x)

    def du(x):
        x = np.asarray(x, dtype=float)
        return k * (A * np.sinh(k * x) + B * np.cosh(k * x))
    return u, du


def exit_value_expectation(g, a: float) -> float:
    """(g(a) + g(-a)) / 2: driftless exit value from the middle of [-a, a]."""
    boundary = _boundary_function(g)
    return float((boundary(np.float64(a)) + boundary(np.float64(-a))) / 2.0)


@dataclass(frozen=True)
class PathEnumeration:
    """Every increment sequence up to the cap, with its exit step and exit index."""

    n: int
    rule: StoppingRule
    increments: np.ndarray
    exit_steps: np.ndarray
    exit_j: np.ndarray

    @property
    def steps(self) -> int:
        return int(self.increments.shape[1])

    @property
    def capped(self) -> np.ndarray:
        m = self.rule.exit_level(self.n)
        if m is None:
            return np.ones(self.exit_steps.shape, dtype=bool)
        level = np.abs(self.exit_j) if self.rule.two_sided else self.exit_j
        return level < m

    @property
    def exit_positions(self) -> np.ndarray:
        return self.exit_j / math.sqrt(self.n)

    @property
    def exit_times(self) -> np.ndarray:
        return np.where(self.capped, self.rule.cap, self.exit_steps / self.n)


def enumerate_paths(walk_spec: WalkParams | Lattice | int, rule: StoppingRule) -> PathEnumeration:
    n = walk_spec if isinstance(walk_spec, (int, np.integer)) else walk_spec.n
    steps = rule.cap_steps(int(n))
    if steps > Config.ENUM_MAX_STEPS:
        raise PathSizeError(f"enumeration needs 2**{steps} paths (limit 2**{Config.ENUM_MAX_STEPS})")
    increments = enumerate_increments(steps)
    exit_steps, exit_j = lattice_exit_steps(increments, int(n), rule)
    return PathEnumeration(n=int(n), rule=rule, increments=increments, exit_steps=exit_steps, exit_j=exit_j)


def enumerate_lattice_expectation(walk_spec, rule: StoppingRule, functional: Callable) -> float:
    """
    Exact expectation over all 2**steps equiprobable increment sequences.

    Args:
        walk_spec: WalkParams, Lattice or n
        rule: stopping rule; its cap fixes the number of steps
        functional: maps a PathEnumeration to per-path values (averaged here)
            or to the expectation itself

    Returns:
        expectation as a float
    """
    enum = enumerate_paths(walk_spec, rule)
    out = functional(enum)
    if np.ndim(out) == 0:
        return float(out)
    values = np.asarray(out, dtype=float)
    if values.shape != (enum.increments.shape[0],):
        raise InputError(f"functional returned shape {values.shape}, expected one value per path")
    return math.fsum(values) / values.size


def exit_value(terminal: TerminalCondition) -> Callable:
    """Per-path xi at the exit state."""
    def functional(enum: PathEnumeration) -> np.ndarray:
        return np.asarray(terminal.evaluate(enum.exit_positions, enum.exit_times), dtype=float)
    return functional


def hitting_probability(step: int) -> Callable:
    """Per-path indicator of tau^n = step / n."""
    def functional(enum: PathEnumeration) -> np.ndarray:
        return (enum.exit_steps == step).astype(float)
    return functional


def backward_recursion(gen: Generator, terminal: TerminalCondition, cfg: NodeSolveConfig | None = None) -> Callable:
    """
    Root value of the path-indexed backward equation on the binary tree of prefixes.

    Prefixes of length d stopped at or before d take the value xi; the others solve
    the node fixed point from their two children.
    """
    def functional(enum: PathEnumeration) -> float:
        xi = np.asarray(terminal.evaluate(enum.exit_positions, enum.exit_times), dtype=float)
        values = xi.copy()
        depth = enum.steps
        for d in range(depth - 1, -1, -1):
            pairs = values.reshape(-1, 2)
            # prefix p of length d owns leaves p * 2**(depth-d) onwards
            rep = np.arange(pairs.shape[0]) << (depth - d)
            stopped = enum.exit_steps[rep] <= d
            y_up, y_down = pairs[:, 0], pairs[:, 1]
            z = lattice_conditional_z(y_up, y_down, enum.n)
            live = np.flatnonzero(~stopped)
            nxt = xi[rep].copy()
            if live.size:
                nxt[live] = solve_node_y((y_up[live] + y_down[live]) / 2.0, z[live],
                                         np.full(live.size, d / enum.n), gen, enum.n, cfg)
            values = nxt
        return float(values[0])
    return functional


def expected_exit_steps(m: int, start: int = 0) -> float:
    """
    Mean number of +-1 steps for a walk started at `start` to reach |j| = m.

    Solves E_j - (E_{j+1} + E_{j-1}) / 2 = 1 on |j| < m with E_{+-m} = 0.
    """
    if m < 1:
        raise DomainError(f"exit level must be >= 1, got {m}")
    if abs(start) >= m:
        return 0.0
    size = 2 * m - 1
    ab = np.zeros((3, size))
    ab[0, 1:] = -0.5
    ab[1] = 1.0
    ab[2, :-1] = -0.5
    expected = solve_banded((1, 1), ab, np.ones(size))
    return float(expected[start + m - 1])


def exit_time_law(walk_spec, rule: StoppingRule) -> dict[float, float]:
    """Exact law of tau^n as {time: probability}; capped paths sit at the cap."""
    enum = enumerate_paths(walk_spec, rule)
    times, counts = np.unique(enum.exit_times, return_counts=True)
    total = enum.increments.shape[0]
    return {float(t): c / total for t, c in zip(times, counts)}
