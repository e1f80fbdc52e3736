"""
Least-squares Monte Carlo for the BSDE driven by a discretized Brownian martingale.

At each subdivision step the continuation C = Y_{k+1} is regressed jointly on
[phi(X_k), phi(X_k) * dW_k] for the still-running paths:

    C = phi a + (phi b) dW + N

so that E_k[C] = phi a, Z_k = phi b and the residual N is orthogonal to dW by
least-squares geometry. Y_k then solves Y = E_k[C] + f(t_k, Y, Z) d<W>_k.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import qr, solve_triangular

from core.errors import ContractionError, InputError, RankError
from schemes.generators import Generator, TerminalCondition, zero_generator
from schemes.lattice_solver import NodeSolveConfig, solve_node_y
from schemes.metrics import bootstrap_stderr
from schemes.paths import PathBatch, discretize_batch
from schemes.stopping import StoppingRule, batch_exit_steps

logger = logging.getLogger(__name__)

RANK_TOL = 1e-10


@dataclass(frozen=True)
class RegressionBasis:
    kind: str = "polynomial"
    degree_or_bins: int = 2

    def __post_init__(self):
        if self.kind not in ("polynomial", "bins"):
            raise InputError(f"basis kind must be 'polynomial' or 'bins', got {self.kind}")
        if self.kind == "polynomial" and self.degree_or_bins < 0:
            raise InputError(f"polynomial degree must be >= 0, got {self.degree_or_bins}")
        if self.kind == "bins" and self.degree_or_bins < 1:
            raise InputError(f"bin count must be >= 1, got {self.degree_or_bins}")

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Design matrix of the state sample x, one row per path."""
        x = np.asarray(x, dtype=float)
        if self.kind == "polynomial":
            scale = float(np.max(np.abs(x))) or 1.0
            return np.vander(x / scale, self.degree_or_bins + 1, increasing=True)
        lo, hi = float(np.min(x)), float(np.max(x))
        if hi == lo:
            return np.ones((x.size, 1))
        edges = np.linspace(lo, hi, self.degree_or_bins + 1)
        owner = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, self.degree_or_bins - 1)
        design = np.zeros((x.size, self.degree_or_bins))
        design[np.arange(x.size), owner] = 1.0
        return design[:, design.any(axis=0)]


def _least_squares(design: np.ndarray, target: np.ndarray, basis: RegressionBasis, step: int) -> np.ndarray:
    rows, cols = design.shape
    if rows < cols:
        raise RankError(f"step {step}: {rows} running paths for {cols} regressors; use a lower degree or more paths")
    q, r = qr(design, mode="economic")
    diag = np.abs(np.diag(r))
    if diag.min() <= RANK_TOL * diag.max():
        raise RankError(
            f"step {step}: regression matrix is singular for basis {basis.kind}:{basis.degree_or_bins}; "
            f"use a lower degree"
        )
    return solve_triangular(r, q.T @ target)


@dataclass
class McSolution:
    grid: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    N: np.ndarray
    xi: np.ndarray
    exit_steps: np.ndarray
    capped: np.ndarray
    # xi + sum of f d<W> along each path; its mean estimates Y_0
    targets: np.ndarray
    orthogonality: list[float] = field(default_factory=list)
    y0_stderr: float = float("nan")

    @property
    def path_count(self) -> int:
        return int(self.Y.shape[0])

    @property
    def subdivision(self) -> np.ndarray:
        return self.grid

    @property
    def y0(self) -> float:
        return float(np.mean(self.Y[:, 0]))

    @property
    def orthogonality_residual(self) -> float:
        return max(self.orthogonality, default=0.0)

    def n_paths(self) -> np.ndarray:
        """Running orthogonal martingale: cumulative N-increments, 0 at time 0."""
        out = np.zeros(self.Y.shape)
        np.cumsum(self.N, axis=1, out=out[:, 1:])
        return out

    def z_bracket(self) -> np.ndarray:
        """Per path sum of Z^2 d<W> up to the exit."""
        return np.sum(self.Z**2 * np.diff(self.grid)[None, :], axis=1)


def lsmc_solve(paths: PathBatch, rule: StoppingRule, gen: Generator, terminal: TerminalCondition,
               basis: RegressionBasis, cfg: NodeSolveConfig | None = None, bootstrap_resamples: int = 200,
               seed: int = 0) -> McSolution:
    """
    Backward regression over the batch grid (the subdivision the paths are observed on).

    Args:
        paths: batch observed on one subdivision (see paths.discretize_batch)
        rule: stopping rule applied at subdivision points
        gen: driver
        terminal: xi at the exit state and time
        basis: regression basis in the current state
        cfg: node fixed-point settings
        bootstrap_resamples: resamples for the Y_0 standard error, 0 to skip
        seed: bootstrap seed

    Returns:
        McSolution
    """
    grid = paths.grid
    dt = np.diff(grid)
    if gen.K * paths.mesh >= 1:
        raise ContractionError(f"K*mesh = {gen.K}*{paths.mesh:g} >= 1; the node map is not a contraction")
    exit_steps, capped, cap_index = batch_exit_steps(paths, rule)
    count, size = paths.count, grid.size
    rows = np.arange(count)

    exit_x = paths.values[rows, exit_steps]
    exit_t = np.where(capped, rule.cap, grid[exit_steps])
    xi = np.asarray(terminal.evaluate(exit_x, exit_t), dtype=float)
    xi = np.broadcast_to(xi, (count,)).astype(float)

    Y = np.repeat(xi[:, None], size, axis=1)
    Z = np.zeros((count, size - 1))
    N = np.zeros((count, size - 1))
    drift = np.zeros((count, size - 1))
    dW = paths.increments()
    orthogonality = []

    for k in range(cap_index - 1, -1, -1):
        live = np.flatnonzero(exit_steps > k)
        if live.size == 0:
            continue
        cont = Y[live, k + 1]
        state = paths.values[live, k]
        dw = dW[live, k]
        if np.ptp(cont) == 0.0:
            mean, z = np.full(live.size, cont[0]), np.zeros(live.size)
        else:
            phi = np.ones((live.size, 1)) if np.ptp(state) == 0.0 else basis.evaluate(state)
            coef = _least_squares(np.hstack([phi, phi * dw[:, None]]), cont, basis, k)
            mean, z = phi @ coef[:phi.shape[1]], phi @ coef[phi.shape[1]:]
        resid = cont - mean - z * dw
        scale = math.sqrt(float(np.sum(cont**2)) * float(np.sum(dw**2)))
        orthogonality.append(abs(float(np.dot(resid, dw))) / scale if scale > 0 else 0.0)

        t_k = np.full(live.size, grid[k])
        y = solve_node_y(mean, z, t_k, gen, 1.0 / dt[k], cfg)
        Y[live, k] = y
        Z[live, k] = z
        N[live, k] = resid
        drift[live, k] = np.asarray(gen.eval(t_k, y, z)) * dt[k]

    targets = xi + drift.sum(axis=1)
    sol = McSolution(grid=grid, Y=Y, Z=Z, N=N, xi=xi, exit_steps=exit_steps, capped=capped, targets=targets,
                     orthogonality=orthogonality)
    if bootstrap_resamples:
        sol.y0_stderr = bootstrap_stderr(targets, bootstrap_resamples, seed)
    logger.info("lsmc: %d paths, mesh %.4g, Y0=%.10g (stderr %.3g), orthogonality %.3g", count, paths.mesh,
                sol.y0, sol.y0_stderr, sol.orthogonality_residual)
    return sol


@dataclass(frozen=True)
class MartingaleReference:
    """Reference martingale u(W_{t^tau}) with Z = u'(W_{t^tau})."""

    u: Callable
    du: Callable
    name: str

    @classmethod
    def constant(cls, c: float) -> "MartingaleReference":
        return cls(u=lambda x: np.full(np.shape(x), float(c)), du=lambda x: np.zeros(np.shape(x)),
                   name=f"constant:{c:g}")

    @classmethod
    def identity(cls) -> "MartingaleReference":
        return cls(u=lambda x: np.asarray(x, dtype=float), du=lambda x: np.ones(np.shape(x)), name="identity")

    @classmethod
    def from_bvp(cls, reference) -> "MartingaleReference":
        """Wrap an oracle ReferenceSolution."""
        return cls(u=reference.value, du=reference.derivative, name="bvp")


@dataclass(frozen=True)
class DecompositionLevel:
    mesh: float
    m_discrepancy: float
    z_bracket_gap: float
    n_norm: float
    orthogonality: float


@dataclass(frozen=True)
class DecompositionReport:
    levels: tuple[DecompositionLevel, ...]

    def decreasing(self, attribute: str) -> bool:
        values = [getattr(level, attribute) for level in self.levels]
        return values[-1] < values[0]


def _fine_reference(fine: PathBatch, fine_rule: StoppingRule, reference: MartingaleReference):
    exit_steps, _, cap_index = batch_exit_steps(fine, fine_rule)
    idx = np.minimum(np.arange(fine.grid.size)[None, :], exit_steps[:, None])
    stopped = fine.values[np.arange(fine.count)[:, None], idx]
    m_ref = np.asarray(reference.u(stopped), dtype=float)
    dt = np.diff(fine.grid)
    live = np.arange(fine.grid.size - 1)[None, :] < exit_steps[:, None]
    z_ref = np.where(live, np.asarray(reference.du(fine.values[:, :-1]), dtype=float) ** 2 * dt[None, :], 0.0)
    return m_ref, z_ref.sum(axis=1), cap_index


def decomposition_stability(fine: PathBatch, levels: Sequence[tuple[np.ndarray, StoppingRule]],
                            terminal: TerminalCondition, basis: RegressionBasis,
                            reference: MartingaleReference, fine_rule: StoppingRule) -> DecompositionReport:
    """
    Driverless decomposition xi^n = M_0 + int Z dW^n + N at each refinement level.

    Args:
        fine: Brownian batch on the fine grid
        levels: (subdivision, stopping rule) per level, coarse to fine
        terminal: xi as a function of the exit state
        basis: regression basis
        reference: limiting martingale evaluated on the fine paths
        fine_rule: stopping rule of the limit, applied on the fine grid

    Returns:
        DecompositionReport with, per level, the S^2 distance of M^n to the
        reference, the gap of mean int Z^2 d<W> to its reference, and the S^2 norm of N
    """
    if not levels:
        raise InputError("no refinement levels")
    m_ref, z_ref, _ = _fine_reference(fine, fine_rule, reference)
    driverless = zero_generator()
    rows = []
    for subdivision, rule in levels:
        coarse = discretize_batch(fine, subdivision)
        sol = lsmc_solve(coarse, rule, driverless, terminal, basis, bootstrap_resamples=0)
        # piecewise-constant M^n seen on the fine grid
        owner = np.searchsorted(coarse.grid, fine.grid, side="right") - 1
        m_n = sol.Y[:, owner]
        sup_gap = np.max(np.abs(m_n - m_ref), axis=1)
        n_sup = np.max(np.abs(sol.n_paths()), axis=1)
        rows.append(DecompositionLevel(
            mesh=coarse.mesh,
            m_discrepancy=float(np.sqrt(np.mean(sup_gap**2))),
            z_bracket_gap=abs(float(np.mean(sol.z_bracket())) - float(np.mean(z_ref))),
            n_norm=float(np.sqrt(np.mean(n_sup**2))),
            orthogonality=sol.orthogonality_residual,
        ))
        logger.info("decomposition mesh %.4g: M gap %.4g, Z gap %.4g, N norm %.4g", rows[-1].mesh,
                    rows[-1].m_discrepancy, rows[-1].z_bracket_gap, rows[-1].n_norm)
    return DecompositionReport(levels=tuple(rows))


def bracket_stopped_identity(process, tau) -> tuple[np.ndarray, np.ndarray]:
    """
    <M>_{t^tau} and <M^tau>_t on the grid of a discretized martingale.

    Args:
        process: PathBatch observed on its subdivision, or the subdivision itself
        tau: stopping time(s) on the grid, scalar or one per path

    Returns:
        (lhs, rhs), each of shape (paths, grid points)
    """
    grid = process.grid if isinstance(process, PathBatch) else np.asarray(process, dtype=float)
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    if np.any(tau < 0):
        raise InputError("stopping times must be >= 0")
    stopped_t = np.minimum(grid[None, :], tau[:, None])
    lhs = grid[np.searchsorted(grid, stopped_t, side="right") - 1]
    increments = np.diff(grid)[None, :] * (grid[None, :-1] < tau[:, None])
    rhs = np.zeros(lhs.shape)
    np.cumsum(increments, axis=1, out=rhs[:, 1:])
    return lhs, rhs


def stopped_bracket_sup(batch: PathBatch, rule: StoppingRule) -> float:
    """sup over paths of <W^n> at tau^n."""
    exit_steps, _, _ = batch_exit_steps(batch, rule)
    return float(np.max(batch.grid[exit_steps]))
