"""
Backward induction of the walk-driven BSDE on the recombining lattice.

Node (k, j) sits at time k/n and position j/sqrt(n). Up moves go to j + 1.
A node is active while the walk has not stopped; once the first-passage rule
fires (or the cap is reached) the node is an exit node, holding y = xi and z = 0.
First-passage stopping is absorbing on the lattice, so (k, j) plus the exit
flag is a sufficient state.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import pandas as pd

from core.config import Config
from core.errors import ContractionError, InputError, NonConvergenceError
from schemes.generators import Generator, TerminalCondition
from schemes.paths import Lattice, WalkParams
from schemes.stopping import StoppingRule

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NodeSolveConfig:
    fixed_point_tol: float = Config.FIXED_POINT_TOL
    max_iters: int = Config.MAX_ITERS
    # starting point of the node fixed point is m + initial_offset
    initial_offset: float = 0.0

    def __post_init__(self):
        if not self.fixed_point_tol > 0:
            raise InputError(f"fixed_point_tol must be > 0, got {self.fixed_point_tol}")
        if int(self.max_iters) < 1:
            raise InputError(f"max_iters must be >= 1, got {self.max_iters}")


def lattice_conditional_z(y_up, y_down, n: int, active=True):
    """sqrt(n) * (y_up - y_down) / 2 on active nodes, 0 elsewhere."""
    z = math.sqrt(n) * (np.asarray(y_up, dtype=float) - np.asarray(y_down, dtype=float)) / 2.0
    z = np.where(active, z, 0.0)
    return float(z) if z.ndim == 0 else z


def solve_node_y(m, z, t, gen: Generator, n: int, cfg: NodeSolveConfig | None = None):
    """
    Fixed point of y -> m + f(t, y, z) / n.

    Args:
        m: conditional mean (y_up + y_down) / 2, scalar or array
        z: node z, same shape as m
        t: node time
        gen: driver
        n: scale (1 / step size)
        cfg: tolerance and iteration limit

    Returns:
        y with the shape of m

    Raises:
        ContractionError: K/n >= 1
        NonConvergenceError: max_iters exceeded
    """
    cfg = cfg or NodeSolveConfig()
    ratio = gen.K / n
    if ratio >= 1:
        raise ContractionError(f"K/n = {gen.K}/{n} = {ratio:.6g} >= 1; the node map is not a contraction")
    m = np.asarray(m, dtype=float)
    if not gen.depends_on_y:
        y = m + np.asarray(gen.eval(t, m, z)) / n
        return float(y) if y.ndim == 0 else y

    y = m + cfg.initial_offset
    for _ in range(int(cfg.max_iters)):
        y_next = m + np.asarray(gen.eval(t, y, z)) / n
        if np.all(np.abs(y_next - y) <= cfg.fixed_point_tol * np.maximum(1.0, np.abs(y_next))):
            return float(y_next) if y_next.ndim == 0 else y_next
        y = y_next
    gap = float(np.max(np.abs(m + np.asarray(gen.eval(t, y, z)) / n - y)))
    raise NonConvergenceError(
        f"node fixed point did not reach tol {cfg.fixed_point_tol:g} in {cfg.max_iters} iterations (gap {gap:.3g})"
    )


@dataclass(frozen=True)
class LatticeLayout:
    """Node bookkeeping shared by the solvers: columns j = lower..upper, rows k = 0..cap_steps."""

    lattice: Lattice
    rule: StoppingRule
    cap_steps: int
    exit_level: int | None
    lower: int
    upper: int
    reachable: np.ndarray
    active: np.ndarray

    @property
    def n(self) -> int:
        return self.lattice.n

    @property
    def width(self) -> int:
        return self.upper - self.lower + 1

    @property
    def columns(self) -> np.ndarray:
        return np.arange(self.lower, self.upper + 1, dtype=np.int64)

    @property
    def exit(self) -> np.ndarray:
        return self.reachable & ~self.active

    def col(self, j):
        return np.asarray(j) - self.lower

    def positions(self) -> np.ndarray:
        return self.columns / math.sqrt(self.n)

    def times(self) -> np.ndarray:
        return np.arange(self.cap_steps + 1) / self.n

    def live_level(self, j) -> np.ndarray:
        j = np.asarray(j)
        if self.exit_level is None:
            return np.ones(j.shape, dtype=bool)
        return (np.abs(j) if self.rule.two_sided else j) < self.exit_level

    def exit_times(self) -> np.ndarray:
        """Exit time of every row: k/n for barrier exits, the cap for the final row."""
        times = np.repeat(self.times()[:, None], self.width, axis=1)
        times[self.cap_steps, self.live_level(self.columns)] = self.rule.cap
        return times


def build_layout(lattice: Lattice, rule: StoppingRule) -> LatticeLayout:
    """
    Reachable and active nodes of the stopped walk.

    Raises:
        InputError: the cap needs more steps than the lattice depth
    """
    n = lattice.n
    cap_steps = rule.cap_steps(n)
    if cap_steps > lattice.depth:
        raise InputError(f"cap {rule.cap} needs {cap_steps} steps, the lattice has depth {lattice.depth}")
    m = rule.exit_level(n)
    upper = cap_steps if m is None else min(m, cap_steps)
    lower = -upper if (m is None or rule.two_sided) else -cap_steps
    width = upper - lower + 1
    columns = np.arange(lower, upper + 1)

    if m is None:
        live = np.ones(width, dtype=bool)
    else:
        live = (np.abs(columns) if rule.two_sided else columns) < m

    reachable = np.zeros((cap_steps + 1, width), dtype=bool)
    active = np.zeros_like(reachable)
    reachable[0, -lower] = True
    for k in range(cap_steps + 1):
        active[k] = reachable[k] & live & (k < cap_steps)
        if k < cap_steps:
            src = np.flatnonzero(active[k])
            reachable[k + 1, src + 1] = True
            reachable[k + 1, src - 1] = True
    return LatticeLayout(lattice=lattice, rule=rule, cap_steps=cap_steps, exit_level=m,
                         lower=lower, upper=upper, reachable=reachable, active=active)


def terminal_values(layout: LatticeLayout, terminal: TerminalCondition) -> np.ndarray:
    xi = np.full(layout.reachable.shape, np.nan)
    ex = layout.exit
    pos = np.broadcast_to(layout.positions()[None, :], xi.shape)
    xi[ex] = np.asarray(terminal.evaluate(pos[ex], layout.exit_times()[ex]), dtype=float)
    return xi


@dataclass(frozen=True)
class DiscreteSolution:
    layout: LatticeLayout
    y: np.ndarray
    z: np.ndarray
    terminal_xi: np.ndarray
    # f(t_k, y_k, z_k) / n on active nodes, 0 elsewhere
    drift: np.ndarray
    generator_name: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.layout.n

    @property
    def active(self) -> np.ndarray:
        return self.layout.active

    @property
    def y0(self) -> float:
        return float(self.y[0, self.layout.col(0)])

    def node(self, k: int, j: int) -> tuple[float, float]:
        c = int(self.layout.col(j))
        if not (0 <= k <= self.layout.cap_steps and 0 <= c < self.layout.width and self.layout.reachable[k, c]):
            raise InputError(f"node ({k}, {j}) is not reachable")
        return float(self.y[k, c]), float(self.z[k, c])

    def trace_paths(self, increments) -> tuple[np.ndarray, np.ndarray]:
        """
        Node visited at every step by each increment row, held at the exit node once stopped.

        Returns:
            (rows, cols) index arrays of shape (paths, cap_steps + 1)
        """
        inc = np.atleast_2d(np.asarray(increments, dtype=np.int64))
        K = self.layout.cap_steps
        if inc.shape[1] < K:
            raise InputError(f"need {K} increments per path, got {inc.shape[1]}")
        cols = np.empty((inc.shape[0], K + 1), dtype=np.int64)
        cols[:, 0] = self.layout.col(0)
        for k in range(K):
            moving = self.layout.active[k, cols[:, k]]
            cols[:, k + 1] = cols[:, k] + np.where(moving, inc[:, k], 0)
        rows = np.broadcast_to(np.arange(K + 1), cols.shape)
        # held paths keep the exit node's row
        stopped = ~self.layout.active[rows, cols]
        first_stop = np.where(stopped.any(axis=1), np.argmax(stopped, axis=1), K)
        rows = np.minimum(rows, first_stop[:, None])
        return rows, cols

    def path_values(self, increments) -> tuple[np.ndarray, np.ndarray]:
        """Stopped (y, z) along each increment row."""
        rows, cols = self.trace_paths(increments)
        return self.y[rows, cols], self.z[rows, cols]

    def to_frame(self, martingale: "NodeMartingale | None" = None) -> pd.DataFrame:
        """Reachable nodes as rows with columns k, j, position, active, y, z, M."""
        ks, cs = np.nonzero(self.layout.reachable)
        j = cs + self.layout.lower
        frame = pd.DataFrame({
            "k": ks,
            "j": j,
            "position": j / math.sqrt(self.n),
            "active": self.layout.active[ks, cs],
            "y": self.y[ks, cs],
            "z": self.z[ks, cs],
        })
        m = martingale or martingale_M(self)
        frame["M"] = m.node_mean[ks, cs]
        return frame


def backward_solve(lattice: Lattice | WalkParams, gen: Generator, terminal: TerminalCondition,
                   rule: StoppingRule, cfg: NodeSolveConfig | None = None) -> DiscreteSolution:
    """
    Solve y_k = (y_up + y_down)/2 + f(k/n, y_k, z_k)/n backward from the exit nodes.

    Args:
        lattice: lattice (or walk parameters) giving n and the available depth
        gen: driver
        terminal: xi as a function of the exit state (and exit time)
        rule: first-passage rule with cap
        cfg: node fixed-point settings

    Returns:
        DiscreteSolution over the reachable nodes
    """
    cfg = cfg or NodeSolveConfig()
    if isinstance(lattice, WalkParams):
        lattice = Lattice(n=lattice.n, depth=lattice.steps)
    n = lattice.n
    if gen.K / n >= 1:
        raise ContractionError(f"n = {n} must exceed the Lipschitz constant K = {gen.K}")
    layout = build_layout(lattice, rule)
    xi = terminal_values(layout, terminal)

    y = np.where(layout.exit, xi, np.nan)
    z = np.where(layout.reachable, 0.0, np.nan)
    drift = np.where(layout.reachable, 0.0, np.nan)
    for k in range(layout.cap_steps - 1, -1, -1):
        c = np.flatnonzero(layout.active[k])
        if c.size == 0:
            continue
        y_up, y_down = y[k + 1, c + 1], y[k + 1, c - 1]
        z_k = lattice_conditional_z(y_up, y_down, n)
        t_k = np.full(c.size, k / n)
        y_k = solve_node_y((y_up + y_down) / 2.0, z_k, t_k, gen, n, cfg)
        y[k, c] = y_k
        z[k, c] = z_k
        drift[k, c] = np.asarray(gen.eval(t_k, y_k, z_k)) / n

    sol = DiscreteSolution(layout=layout, y=y, z=z, terminal_xi=xi, drift=drift, generator_name=gen.name,
                           meta={"terminal": terminal.name, "cap": rule.cap, "barrier_an": rule.barrier_an})
    logger.debug("backward_solve n=%d cap_steps=%d active=%d Y0=%.17g", n, layout.cap_steps,
                 int(layout.active.sum()), sol.y0)
    return sol


def node_probabilities(source: DiscreteSolution | LatticeLayout, absorb_level: int | None = None) -> np.ndarray:
    """
    Probability that the stopped walk visits each node.

    With absorb_level, paths also stop at the first |j| >= absorb_level (or j >= for
    one-sided rules), which may come before the layout's own exit level.
    """
    layout = source.layout if isinstance(source, DiscreteSolution) else source
    prob = np.zeros(layout.reachable.shape)
    prob[0, layout.col(0)] = 1.0
    moving = layout.active.copy()
    if absorb_level is not None:
        cols = layout.columns
        level = np.abs(cols) if layout.rule.two_sided else cols
        moving &= (level < absorb_level)[None, :]
    for k in range(layout.cap_steps):
        src = np.flatnonzero(moving[k] & (prob[k] > 0))
        half = prob[k, src] / 2.0
        np.add.at(prob[k + 1], src + 1, half)
        np.add.at(prob[k + 1], src - 1, half)
    return prob


@dataclass(frozen=True)
class NodeMartingale:
    """M = y + integral of the driver against the walk clock."""

    solution: DiscreteSolution

    @cached_property
    def node_mean(self) -> np.ndarray:
        """y(k, j) + E[accumulated drift | walk at node (k, j)] on reachable nodes."""
        sol = self.solution
        layout = sol.layout
        mass = np.zeros(layout.reachable.shape)
        acc = np.zeros(layout.reachable.shape)
        mass[0, layout.col(0)] = 1.0
        for k in range(layout.cap_steps):
            src = np.flatnonzero(layout.active[k])
            half_mass = mass[k, src] / 2.0
            half_acc = (acc[k, src] + mass[k, src] * sol.drift[k, src]) / 2.0
            for shift in (1, -1):
                np.add.at(mass[k + 1], src + shift, half_mass)
                np.add.at(acc[k + 1], src + shift, half_acc)
        with np.errstate(invalid="ignore", divide="ignore"):
            expected = np.where(mass > 0, acc / np.where(mass > 0, mass, 1.0), 0.0)
        return np.where(layout.reachable, sol.y + expected, np.nan)

    def child_average_residual(self) -> float:
        """max over active nodes of |y_k - (y_up + y_down)/2 - f/n|, the one-step martingale defect."""
        sol = self.solution
        worst = 0.0
        for k in range(sol.layout.cap_steps):
            c = np.flatnonzero(sol.layout.active[k])
            if c.size:
                gap = sol.y[k, c] - (sol.y[k + 1, c + 1] + sol.y[k + 1, c - 1]) / 2.0 - sol.drift[k, c]
                worst = max(worst, float(np.max(np.abs(gap))))
        return worst

    def path_values(self, increments) -> np.ndarray:
        """M along each increment row: y plus the running sum of the drift, held after exit."""
        sol = self.solution
        rows, cols = sol.trace_paths(increments)
        y = sol.y[rows, cols]
        steps = np.where(sol.layout.active[rows, cols], sol.drift[rows, cols], 0.0)
        running = np.zeros_like(y)
        np.cumsum(steps[:, :-1], axis=1, out=running[:, 1:])
        return y + running


def martingale_M(sol: DiscreteSolution, gen: Generator | None = None) -> NodeMartingale:
    """
    Martingale M = y + integral of f dA^n for a solution.

    gen, when given, must be the driver the solution was computed with; the
    drift stored on the solution is used either way.
    """
    if gen is not None and gen.name != sol.generator_name:
        raise InputError(f"solution was computed with driver {sol.generator_name}, not {gen.name}")
    return NodeMartingale(sol)


def one_step_residual(sol: DiscreteSolution, gen: Generator) -> float:
    """max over active nodes and both branches of |y_k - y_child - f/n + z eps / sqrt(n)|."""
    layout, n = sol.layout, sol.n
    root = math.sqrt(n)
    worst = 0.0
    for k in range(layout.cap_steps):
        c = np.flatnonzero(layout.active[k])
        if c.size == 0:
            continue
        f = np.asarray(gen.eval(np.full(c.size, k / n), sol.y[k, c], sol.z[k, c]))
        for eps in (1, -1):
            res = sol.y[k, c] - sol.y[k + 1, c + eps] - f / n + sol.z[k, c] * eps / root
            worst = max(worst, float(np.max(np.abs(res))))
    return worst


def freezing_residual(sol: DiscreteSolution) -> float:
    """max over exit nodes of |y - xi| + |z|; zero when exit nodes are frozen."""
    ex = sol.layout.exit
    if not ex.any():
        return 0.0
    return float(np.max(np.abs(sol.y[ex] - sol.terminal_xi[ex]) + np.abs(sol.z[ex])))


def qv_path_residual(sol: DiscreteSolution, increments) -> float:
    """max over paths and steps of |[M]_k - (1/n) sum |z|^2| along the given increment rows."""
    m_path = martingale_M(sol).path_values(increments)
    rows, cols = sol.trace_paths(increments)
    z = np.where(sol.layout.active[rows, cols], sol.z[rows, cols], 0.0)
    qv = np.zeros_like(m_path)
    np.cumsum(np.diff(m_path, axis=1) ** 2, axis=1, out=qv[:, 1:])
    clock = np.zeros_like(m_path)
    np.cumsum(z[:, :-1] ** 2 / sol.n, axis=1, out=clock[:, 1:])
    return float(np.max(np.abs(qv - clock)))


def _step_overlap(steps: int, n: int, upto: float) -> np.ndarray:
    left = np.arange(steps) / n
    right = np.arange(1, steps + 1) / n
    return np.clip(np.minimum(right, upto) - left, 0.0, None)


def stopped_integral_identity(f_samples, tau: float, t: float, n: int) -> tuple[float, float]:
    """
    Both sides of int_0^{t^tau} f ds = int_0^t f(s^tau) ds + (tau^t - t) f(tau).

    Args:
        f_samples: step integrand, f_samples[i] on [i/n, (i+1)/n)
        tau: stopping time
        t: horizon of the integral
        n: scale

    Returns:
        (lhs, rhs)
    """
    f = np.asarray(f_samples, dtype=float)
    if tau < 0 or t < 0:
        raise InputError(f"tau and t must be >= 0, got {tau}, {t}")
    needed = math.ceil(t * n - 1e-12)
    if f.size < needed:
        raise InputError(f"integrand covers {f.size / n} time units, need {t}")
    stop = min(tau, t)
    end_index = min(int(math.floor(tau * n + 1e-12)), f.size - 1)
    f_end = f[end_index]

    before = f * _step_overlap(f.size, n, stop)
    lhs = math.fsum(before)
    # the stopped integrand is f up to the step holding tau and f(tau) after it
    stopped = np.where(np.arange(f.size) < end_index, f, f_end)
    after = stopped * (_step_overlap(f.size, n, t) - _step_overlap(f.size, n, stop))
    rhs = math.fsum([*before, *after, (stop - t) * f_end])
    return lhs, rhs
