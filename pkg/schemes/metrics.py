"""
Error functionals between lattice solutions and the elliptic reference, the
exact structural identities, and the per-n convergence report.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from core.config import Config
from core.errors import InputError
from core.helpers import Helpers
from core.lab_runner import Job, run_jobs
from schemes.generators import Generator, TerminalCondition, zero_generator
from schemes.lattice_solver import (
    DiscreteSolution,
    NodeSolveConfig,
    backward_solve,
    martingale_M,
    node_probabilities,
    qv_path_residual,
)
from schemes.oracle import solve_bvp
from schemes.paths import Lattice, WalkParams, enumerate_increments, walk_batch
from schemes.stopping import StoppingRule

logger = logging.getLogger(__name__)

CSV_FIELDS = ("n", "Y0_error", "sup_node_error", "z_l2_error", "qv_residual", "martingale_residual")
ENUMERATE_MAX_STEPS = 16


@dataclass(frozen=True)
class ConvergenceRecord:
    n: int
    Y0_error: float
    sup_node_error: float
    z_l2_error: float
    qv_residual: float
    martingale_residual: float
    runtime: float = 0.0
    y0: float = float("nan")


@dataclass
class ConvergenceReport:
    records: list[ConvergenceRecord]
    reference_u0: float = float("nan")
    meta: dict = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        """Numeric fields only; runtime stays out so reruns give identical files."""
        return pd.DataFrame([{k: getattr(r, k) for k in CSV_FIELDS} for r in self.records], columns=list(CSV_FIELDS))

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
        return path

    def to_dict(self) -> dict:
        return {"reference_u0": self.reference_u0, "meta": self.meta, "records": [asdict(r) for r in self.records]}

    def to_json(self, path) -> Path:
        return Helpers.write_json(path, self.to_dict())

    def to_xlsx(self, path, sheet: str = "convergence") -> Path:
        header = list(CSV_FIELDS) + ["runtime"]
        rows = [[getattr(r, k) for k in header] for r in self.records]
        return Helpers.write_xlsx(path, {sheet: (header, rows)})

    def column(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.records]

    def strictly_decreasing(self, name: str) -> bool:
        values = self.column(name)
        return all(b < a for a, b in zip(values, values[1:]))


def sup_process_distance(x, y, L: float, grid=None) -> float:
    """
    max |x(t) - y(t)| over grid points t <= L.

    Args:
        x, y: values on a common grid, last axis is time
        L: horizon
        grid: the common time grid; x.shape[-1] points on [0, L] when omitted
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise InputError(f"grid mismatch: shapes {x.shape} and {y.shape}")
    if x.size == 0:
        raise InputError("empty paths")
    if grid is None:
        return float(np.max(np.abs(x - y)))
    grid = np.asarray(grid, dtype=float)
    if grid.shape[-1] != x.shape[-1]:
        raise InputError(f"grid mismatch: {grid.shape[-1]} times for {x.shape[-1]} values")
    keep = grid <= L + 1e-12
    return float(np.max(np.abs(x - y)[..., keep]))


def sup_node_error(sol: DiscreteSolution, ref, horizon: float | None = None) -> float:
    """
    max over active nodes with k/n <= horizon of |y(k, j) - u(position(j))|.

    horizon defaults to cap/2; inf takes every active node.
    """
    layout = sol.layout
    horizon = layout.rule.cap / 2 if horizon is None else horizon
    rows = layout.times() <= horizon + 1e-12
    mask = layout.active & rows[:, None]
    if not mask.any():
        return 0.0
    u = np.asarray(ref.value(layout.positions()), dtype=float)
    gap = np.abs(sol.y - u[None, :])
    return float(np.max(gap[mask]))


def continuous_absorb_level(a: float, n: int) -> int:
    """First lattice index at or beyond a: the level where the interpolated path has left (-a, a)."""
    return int(math.ceil(a * math.sqrt(n) - 1e-12))


def z_l2_distance(sol: DiscreteSolution, ref, z: np.ndarray | None = None, absorb_level: int | None = None) -> float:
    """
    E[(1/n) sum over steps before tau^tau^n of |z - u'(position)|^2], exactly over the lattice law.

    Args:
        sol: lattice solution
        ref: reference with .derivative and .a
        z: lattice z to compare, sol.z when omitted
        absorb_level: lattice index standing in for the continuous exit; from ref.a when omitted
    """
    layout = sol.layout
    z = sol.z if z is None else np.asarray(z, dtype=float)
    if z.shape != sol.z.shape:
        raise InputError(f"z has shape {z.shape}, the lattice needs {sol.z.shape}")
    level = continuous_absorb_level(ref.a, sol.n) if absorb_level is None else absorb_level
    prob = node_probabilities(layout, absorb_level=level)
    cols = layout.columns
    inside = (np.abs(cols) if layout.rule.two_sided else cols) < level
    mask = layout.active & inside[None, :] & (prob > 0)
    du = np.asarray(ref.derivative(layout.positions()), dtype=float)
    sq = (z - du[None, :]) ** 2
    return math.fsum((prob[mask] * sq[mask]).tolist()) / sol.n


def _paths_for(sol: DiscreteSolution, samples: int, seed: int) -> np.ndarray:
    steps = sol.layout.cap_steps
    if steps <= ENUMERATE_MAX_STEPS:
        return enumerate_increments(steps)
    return walk_batch(WalkParams(n=sol.n, horizon_T=math.ceil(steps / sol.n), seed=seed), samples)[:, :steps]


def qv_residual(sol: DiscreteSolution, gen: Generator | None = None, samples: int = 2000, seed: int = 0) -> float:
    """
    max over paths and steps of |[M]_t - int |z|^2 dA^n|.

    Every path is used when the cap has at most 16 steps, otherwise `samples` walks.
    With gen, M is rebuilt from y and a fresh evaluation of the driver instead of
    the drift stored on the solution.
    """
    increments = _paths_for(sol, samples, seed)
    if gen is None:
        return qv_path_residual(sol, increments)
    rows, cols = sol.trace_paths(increments)
    live = sol.layout.active[rows, cols]
    y, z = sol.y[rows, cols], np.where(live, sol.z[rows, cols], 0.0)
    drift = np.where(live, np.asarray(gen.eval(rows / sol.n, y, z)) / sol.n, 0.0)
    m_path = y.copy()
    m_path[:, 1:] += np.cumsum(drift[:, :-1], axis=1)
    bracket = np.zeros_like(y)
    np.cumsum(np.diff(m_path, axis=1) ** 2, axis=1, out=bracket[:, 1:])
    clock = np.zeros_like(y)
    np.cumsum(z[:, :-1] ** 2 / sol.n, axis=1, out=clock[:, 1:])
    return float(np.max(np.abs(bracket - clock)))


def martingale_residual(sol: DiscreteSolution, gen: Generator | None = None) -> float:
    return martingale_M(sol, gen).child_average_residual()


def martingale_convergence_diag(terminal: TerminalCondition, ns: Sequence[int], a: float, cap: float,
                                samples: int = 2000, seed: int = 0, grid_size: int = 2001) -> dict[int, float]:
    """
    Driverless gap between E[xi | walk up to t^tau^n] and u(W_{t^tau^n}).

    For each n the lattice conditional expectation is y(k, j); u solves the
    driverless elliptic problem. Returns the path average of sup over t of the gap.
    """
    driverless = zero_generator()
    ref = solve_bvp(driverless, terminal, a, grid_size=grid_size)
    out = {}
    for n in ns:
        rule = StoppingRule.aligned(a, n, cap)
        steps = rule.cap_steps(n)
        sol = backward_solve(Lattice(n=n, depth=steps), driverless, terminal, rule)
        rows, cols = sol.trace_paths(_paths_for(sol, samples, seed))
        y = sol.y[rows, cols]
        u = np.asarray(ref.value(sol.layout.positions()), dtype=float)[cols]
        out[int(n)] = float(np.mean(np.max(np.abs(y - u), axis=1)))
        logger.info("martingale diag n=%d: %.6g", n, out[int(n)])
    return out


def bootstrap_stderr(samples, resamples: int = 200, seed: int = 0) -> float:
    """Standard deviation of the resampled means."""
    values = np.asarray(samples, dtype=float).ravel()
    if values.size < 2:
        raise InputError("bootstrap needs at least two samples")
    if resamples < 2:
        raise InputError(f"resamples must be >= 2, got {resamples}")
    rng = np.random.default_rng(seed)
    means = np.empty(resamples)
    for i in range(resamples):
        means[i] = values[rng.integers(0, values.size, size=values.size)].mean()
    return float(np.std(means, ddof=1))


def convergence_record(n: int, gen: Generator, terminal: TerminalCondition, a: float, cap: float, ref,
                       cfg: NodeSolveConfig | None = None, two_sided: bool = True, horizon: float | None = None,
                       samples: int = 2000) -> ConvergenceRecord:
    """
    Errors of the lattice solution at scale n.

    horizon bounds the node times of sup_node_error (cap/2 when None, every active
    node when inf); samples is the walk count of the sampled residuals.
    """
    started = time.perf_counter()
    rule = StoppingRule.aligned(a, n, cap, two_sided=two_sided)
    sol = backward_solve(Lattice(n=n, depth=rule.cap_steps(n)), gen, terminal, rule, cfg)
    record = ConvergenceRecord(
        n=int(n),
        Y0_error=abs(sol.y0 - ref.u0),
        sup_node_error=sup_node_error(sol, ref, horizon),
        z_l2_error=z_l2_distance(sol, ref),
        qv_residual=qv_residual(sol, gen, samples=samples),
        martingale_residual=martingale_residual(sol, gen),
        runtime=time.perf_counter() - started,
        y0=sol.y0,
    )
    logger.info("n=%d Y0=%.12g err=%.4g sup=%.4g zl2=%.4g (%.2fs)", n, record.y0, record.Y0_error,
                record.sup_node_error, record.z_l2_error, record.runtime)
    return record


def convergence_sweep(ns: Sequence[int], gen: Generator, terminal: TerminalCondition, a: float, cap: float,
                      ref, cfg: NodeSolveConfig | None = None, threads: int | None = None,
                      two_sided: bool = True, horizon: float | None = None, samples: int = 2000) -> ConvergenceReport:
    """One ConvergenceRecord per n, run on lanes and merged in n order."""
    if not ns:
        raise InputError("n-list is empty")
    if horizon is not None and not horizon > 0:
        raise InputError(f"sup-node horizon must be > 0, got {horizon}")
    jobs = [Job(job_id=i, scheme="lattice", n=int(n)) for i, n in enumerate(ns)]
    records = run_jobs(
        jobs,
        lambda job: convergence_record(job.n, gen, terminal, a, cap, ref, cfg, two_sided, horizon, samples),
        threads or Config.get_threads(),
    )
    node_horizon = cap / 2 if horizon is None else horizon
    return ConvergenceReport(records=records, reference_u0=ref.u0,
                             meta={"generator": gen.name, "terminal": terminal.name, "a": a, "cap": cap,
                                   "sup_node_horizon": node_horizon if math.isfinite(node_horizon) else "all"})
