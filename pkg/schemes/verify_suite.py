"""
Structural checks run by the `verify` command on one small lattice instance.

Each check reports a residual against a threshold. Checks that need path
enumeration are skipped when the cap has more steps than ENUMERATE_MAX_STEPS.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import pandas as pd

from core.errors import PicardNonConvergenceWarning
from schemes.generators import Generator, SampleBox, TerminalCondition, validate_generator
from schemes.lattice_solver import (
    DiscreteSolution,
    NodeSolveConfig,
    backward_solve,
    freezing_residual,
    one_step_residual,
    stopped_integral_identity,
)
from schemes.lsmc import bracket_stopped_identity
from schemes.metrics import ENUMERATE_MAX_STEPS, martingale_residual, qv_residual
from schemes.oracle import backward_recursion, enumerate_lattice_expectation
from schemes.paths import Lattice, WalkParams, walk_batch
from schemes.picard import picard_martingale_residual, picard_solve, picard_step
from schemes.stopping import StoppingRule

logger = logging.getLogger(__name__)

ADAPTEDNESS_PATHS = 256
STOPPED_INTEGRAL_TRIALS = 1000
MONOTONICITY_SAMPLES = 2000


@dataclass(frozen=True)
class CheckResult:
    check_id: str
    residual: float
    threshold: float
    passed: bool
    skipped: bool = False
    n: int | None = None
    comment: str = ""


@dataclass(frozen=True)
class VerifyReport:
    checks: tuple[CheckResult, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks if not c.skipped)

    @property
    def failed(self) -> list[str]:
        return [c.check_id for c in self.checks if not c.skipped and not c.passed]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(c) for c in self.checks])

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
        return path


@dataclass(frozen=True)
class VerifyInstance:
    gen: Generator
    terminal: TerminalCondition
    rule: StoppingRule
    n: int
    seed: int
    cfg: NodeSolveConfig
    picard_tol: float = 1e-12
    p_max: int = 60

    @property
    def lattice(self) -> Lattice:
        return Lattice(n=self.n, depth=self.rule.cap_steps(self.n))

    def sample_increments(self, count: int) -> np.ndarray:
        steps = self.rule.cap_steps(self.n)
        params = WalkParams(n=self.n, horizon_T=math.ceil(steps / self.n), seed=self.seed)
        return walk_batch(params, count)[:, :steps]


def _check(check_id: str, residual: float, threshold: float, n: int, comment: str = "") -> CheckResult:
    return CheckResult(check_id=check_id, residual=float(residual), threshold=threshold,
                       passed=bool(residual < threshold), n=n, comment=comment)


def _skip(check_id: str, threshold: float, n: int, comment: str) -> CheckResult:
    return CheckResult(check_id=check_id, residual=float("nan"), threshold=threshold, passed=True,
                       skipped=True, n=n, comment=comment)


def check_one_step(inst: VerifyInstance, sol: DiscreteSolution) -> CheckResult:
    return _check("one_step_residual", one_step_residual(sol, inst.gen), 1e-12, inst.n)


def check_martingale(inst: VerifyInstance, sol: DiscreteSolution) -> CheckResult:
    return _check("martingale_identity", martingale_residual(sol, inst.gen), 1e-12, inst.n)


def check_qv(inst: VerifyInstance, sol: DiscreteSolution) -> CheckResult:
    return _check("qv_identity", qv_residual(sol, inst.gen, seed=inst.seed), 1e-12, inst.n)


def check_freezing(inst: VerifyInstance, sol: DiscreteSolution) -> CheckResult:
    residual = freezing_residual(sol)
    return CheckResult(check_id="freezing", residual=residual, threshold=0.0, passed=residual == 0.0, n=inst.n)


def check_adaptedness(inst: VerifyInstance, sol: DiscreteSolution) -> CheckResult:
    """(y, z) up to step k must not move when the increments after step k are flipped."""
    inc = inst.sample_increments(ADAPTEDNESS_PATHS)
    steps = inc.shape[1]
    rng = np.random.default_rng(inst.seed)
    cut = rng.integers(0, steps, size=inc.shape[0])
    after = np.arange(steps)[None, :] >= cut[:, None]
    flipped = np.where(after, -inc, inc)
    y1, z1 = sol.path_values(inc)
    y2, z2 = sol.path_values(flipped)
    known = np.arange(steps + 1)[None, :] <= cut[:, None]
    residual = float(np.max(np.abs(np.where(known, y1 - y2, 0.0)) + np.abs(np.where(known, z1 - z2, 0.0))))
    return CheckResult(check_id="adaptedness", residual=residual, threshold=0.0, passed=residual == 0.0, n=inst.n)


def check_uniqueness(inst: VerifyInstance, sol: DiscreteSolution) -> CheckResult:
    """A node solve started away from the conditional mean lands on the same solution."""
    shifted_cfg = NodeSolveConfig(fixed_point_tol=inst.cfg.fixed_point_tol, max_iters=inst.cfg.max_iters,
                                  initial_offset=1.0)
    other = backward_solve(inst.lattice, inst.gen, inst.terminal, inst.rule, shifted_cfg)
    mask = sol.layout.reachable
    scale = max(1.0, float(np.max(np.abs(sol.y[mask]))))
    residual = float(np.max(np.abs(sol.y[mask] - other.y[mask])))
    return _check("uniqueness", residual, 10 * inst.cfg.fixed_point_tol * scale, inst.n)


def _picard(inst: VerifyInstance):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", PicardNonConvergenceWarning)
        iterate, used = picard_solve(inst.lattice, inst.gen, inst.terminal, inst.rule, p_max=inst.p_max,
                                     tol=inst.picard_tol)
    comment = f"iterations={used}" + ("; p_max reached" if caught else "")
    return iterate, comment


def check_picard_vs_direct(inst: VerifyInstance, sol: DiscreteSolution) -> CheckResult:
    iterate, comment = _picard(inst)
    return _check("picard_vs_direct", iterate.gap(sol), 1e-10, inst.n, comment)


def check_picard_martingale(inst: VerifyInstance, sol: DiscreteSolution) -> CheckResult:
    iterate, comment = _picard(inst)
    following = picard_step(iterate, inst.gen, inst.terminal, inst.rule)
    return _check("picard_martingale", picard_martingale_residual(following, iterate, inst.gen), 1e-12, inst.n,
                  comment)


def check_stopped_integral(inst: VerifyInstance, sol: DiscreteSolution) -> CheckResult:
    rng = np.random.default_rng(inst.seed)
    n, cap = inst.n, inst.rule.cap
    steps = inst.rule.cap_steps(n)
    worst = 0.0
    for _ in range(STOPPED_INTEGRAL_TRIALS):
        f = rng.uniform(-1.0, 1.0, size=steps + 1)
        tau = rng.integers(0, steps + 1) / n
        t = rng.uniform(0.0, steps / n)
        lhs, rhs = stopped_integral_identity(f, tau, t, n)
        worst = max(worst, abs(lhs - rhs))
    return _check("stopped_integral", worst, 1e-14, inst.n, f"trials={STOPPED_INTEGRAL_TRIALS}, cap={cap}")


def check_bracket_stopped(inst: VerifyInstance, sol: DiscreteSolution) -> CheckResult:
    """<W^n>_{t^tau} = <(W^n)^tau>_t on the lattice clock, tau the exit time of sampled walks."""
    inc = inst.sample_increments(ADAPTEDNESS_PATHS)
    rows, _ = sol.trace_paths(inc)
    tau = rows[:, -1] / inst.n
    lhs, rhs = bracket_stopped_identity(sol.layout.times(), tau)
    return _check("bracket_stopped", float(np.max(np.abs(lhs - rhs))), 1e-14, inst.n)


def check_enumeration(inst: VerifyInstance, sol: DiscreteSolution) -> CheckResult:
    steps = inst.rule.cap_steps(inst.n)
    if steps > ENUMERATE_MAX_STEPS:
        return _skip("enumeration_equivalence", 1e-12, inst.n, f"{steps} steps exceed {ENUMERATE_MAX_STEPS}")
    root = enumerate_lattice_expectation(inst.n, inst.rule, backward_recursion(inst.gen, inst.terminal, inst.cfg))
    return _check("enumeration_equivalence", abs(root - sol.y0), 1e-12, inst.n, f"paths=2**{steps}")


def check_monotonicity(inst: VerifyInstance, sol: DiscreteSolution) -> CheckResult:
    if inst.gen.mu is None:
        return _skip("monotonicity", 1.0, inst.n, "driver claims no monotonicity constant")
    report = validate_generator(inst.gen, SampleBox(t=(0.0, inst.rule.cap)), MONOTONICITY_SAMPLES, seed=inst.seed)
    return _check("monotonicity", report.monotonicity_violations, 1.0, inst.n, f"mu={inst.gen.mu}")


CHECKS: tuple[Callable[[VerifyInstance, DiscreteSolution], CheckResult], ...] = (
    check_one_step,
    check_martingale,
    check_qv,
    check_freezing,
    check_adaptedness,
    check_uniqueness,
    check_picard_vs_direct,
    check_picard_martingale,
    check_stopped_integral,
    check_bracket_stopped,
    check_enumeration,
    check_monotonicity,
)


def run_checks(gen: Generator, terminal: TerminalCondition, a: float, n: int, cap: float, seed: int = 0,
               cfg: NodeSolveConfig | None = None, two_sided: bool = True, picard_tol: float = 1e-12,
               p_max: int = 60, on_result: Callable[[CheckResult], None] | None = None) -> VerifyReport:
    """
    Solve one instance and run every check on it.

    Args:
        gen, terminal: driver and terminal condition
        a, n, cap: barrier, lattice scale and cap; the barrier is aligned to the lattice
        seed: seed of the sampled walks and random trials
        cfg: node fixed-point settings
        on_result: called with each result as soon as it is known

    Raises:
        LabError subclasses from the solvers (ContractionError when K/n >= 1)
    """
    cfg = cfg or NodeSolveConfig()
    rule = StoppingRule.aligned(a, n, cap, two_sided=two_sided)
    inst = VerifyInstance(gen=gen, terminal=terminal, rule=rule, n=n, seed=seed, cfg=cfg,
                          picard_tol=picard_tol, p_max=p_max)
    sol = backward_solve(inst.lattice, gen, terminal, rule, cfg)
    results = []
    for check in CHECKS:
        result = check(inst, sol)
        results.append(result)
        level = logging.INFO if result.passed else logging.WARNING
        logger.log(level, "%-24s residual %.3e threshold %.1e %s", result.check_id, result.residual,
                   result.threshold, "SKIPPED" if result.skipped else ("PASSED" if result.passed else "FAILED"))
        if on_result:
            on_result(result)
    return VerifyReport(checks=tuple(results))
