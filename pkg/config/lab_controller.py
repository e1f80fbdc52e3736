"""
Command line entry of the lab.

    python etbsde_app.py run      --config cfg.json [--out DIR] [--threads K] [--seed-override S]
    python etbsde_app.py verify   --config cfg.json
    python etbsde_app.py converge --config cfg.json
    python etbsde_app.py oracle   --config cfg.json

Exit status: 0 success, 1 a verification check failed, 2 malformed config,
3 solver error.
"""

import argparse
import logging
import math
import time
import warnings
from pathlib import Path

import pandas as pd

from config.config_assists import ConfigAssists
from config.experiment_config import ExperimentConfig
from core.config import Config
from core.errors import ConfigValidationError, LabError, PicardNonConvergenceWarning
from core.helpers import Helpers
from schemes.lattice_solver import backward_solve, martingale_M
from schemes.lsmc import lsmc_solve
from schemes.metrics import convergence_sweep
from schemes.oracle import solve_bvp
from schemes.paths import Lattice, discretize_batch, dyadic_subdivision, simulate_batch
from schemes.picard import picard_solve
from schemes.stopping import StoppingRule
from schemes.verify_suite import run_checks

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
EXIT_SOLVER = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="etbsde", description="Exit-time BSDE numerical lab")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("run", "solve the configured scheme and write its report"),
        ("verify", "run the structural checks on small instances"),
        ("converge", "multi-n sweep against the elliptic reference"),
        ("oracle", "solve the elliptic reference only"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", default=None, help="output directory (overrides ETBSDE_OUT_DIR)")
        p.add_argument("--threads", type=int, default=None, help="parallel lanes over n-values")
        p.add_argument("--seed-override", type=_u64, default=None, help="replaces the config seed")
    return parser


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be a 64-bit unsigned integer, got {text}")
    return value


class LabController:
    """Runs one CLI command against a parsed config and records it in the run ledger."""

    def __init__(self, cfg: ExperimentConfig, out_dir: Path, threads: int, ledger: ConfigAssists | None = None):
        self.cfg = cfg
        self.out_dir = out_dir
        self.threads = threads
        self.ledger = ledger
        self.gen = cfg.driver()
        self.terminal = cfg.terminal_condition()

    def artifact(self, name: str, suffix: str) -> Path:
        return Helpers.output_file(self.out_dir, f"{self.cfg.report_name}_{name}", suffix)

    def _update(self, message: str) -> None:
        print(message)
        if self.ledger:
            self.ledger.add_log_update(message)

    # run
    def run(self) -> int:
        scheme = self.cfg.scheme
        if scheme == "lattice":
            self._run_lattice()
        elif scheme == "picard":
            self._run_picard()
        elif scheme == "lsmc":
            self._run_lsmc()
        else:
            self.oracle()
        return EXIT_OK

    def _rule(self, n: int) -> StoppingRule:
        return StoppingRule.aligned(self.cfg.barrier, n, self.cfg.cap, two_sided=self.cfg.two_sided)

    def _run_lattice(self) -> None:
        rows = []
        for n in self.cfg.n_list:
            started = time.perf_counter()
            rule = self._rule(n)
            sol = backward_solve(Lattice(n=n, depth=rule.cap_steps(n)), self.gen, self.terminal, rule,
                                 self.cfg.node_config())
            martingale = martingale_M(sol, self.gen)
            sol.to_frame(martingale).to_csv(self.artifact(f"nodes_n{n}", ".csv"), index=False,
                                            float_format="%.17g", lineterminator="\n")
            rows.append({
                "n": n,
                "Y0": sol.y0,
                "Z0": sol.node(0, 0)[1],
                "cap_steps": sol.layout.cap_steps,
                "active_nodes": int(sol.layout.active.sum()),
                "martingale_residual": martingale.child_average_residual(),
                "runtime": time.perf_counter() - started,
            })
            self._update(f"lattice n={n}: Y0={sol.y0:.12g}")
        self._write_rows("lattice", rows)

    def _run_picard(self) -> None:
        rows = []
        for n in self.cfg.n_list:
            started = time.perf_counter()
            rule = self._rule(n)
            lattice = Lattice(n=n, depth=rule.cap_steps(n))
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", PicardNonConvergenceWarning)
                iterate, used = picard_solve(lattice, self.gen, self.terminal, rule, p_max=self.cfg.p_max,
                                             tol=self.cfg.picard_tol)
            for w in caught:
                logger.warning("n=%d: %s", n, w.message)
            direct = backward_solve(lattice, self.gen, self.terminal, rule, self.cfg.node_config())
            rows.append({"n": n, "Y0": iterate.y0, "iterations": used, "converged": not caught,
                         "gap_to_direct": iterate.gap(direct), "runtime": time.perf_counter() - started})
            self._update(f"picard n={n}: Y0={iterate.y0:.12g} after {used} iterations")
        self._write_rows("picard", rows)

    def _run_lsmc(self) -> None:
        cfg = self.cfg
        fine_mesh = 2.0 ** -cfg.effective_fine_level
        horizon = math.ceil(cfg.cap / fine_mesh) * fine_mesh
        fine = simulate_batch(fine_mesh, horizon, cfg.path_count, cfg.seed)
        basis = cfg.regression_basis()
        rule = StoppingRule(barrier_a=cfg.barrier, barrier_an=cfg.barrier, cap=cfg.cap, two_sided=cfg.two_sided)
        rows = []
        for level in cfg.mesh_levels:
            started = time.perf_counter()
            paths = discretize_batch(fine, dyadic_subdivision(level, horizon))
            sol = lsmc_solve(paths, rule, self.gen, self.terminal, basis, cfg.node_config(),
                             bootstrap_resamples=cfg.bootstrap_resamples, seed=cfg.seed)
            rows.append({"mesh": paths.mesh, "Y0": sol.y0, "stderr": sol.y0_stderr,
                         "orthogonality": sol.orthogonality_residual, "paths": sol.path_count,
                         "runtime": time.perf_counter() - started})
            self._update(f"lsmc mesh={paths.mesh:g}: Y0={sol.y0:.10g} +- {sol.y0_stderr:.3g}")
        self._write_rows("lsmc", rows)

    def _write_rows(self, name: str, rows: list[dict]) -> None:
        frame = pd.DataFrame(rows)
        frame.drop(columns=["runtime"]).to_csv(self.artifact(name, ".csv"), index=False, float_format="%.17g",
                                               lineterminator="\n")
        Helpers.write_json(self.artifact(name, ".json"), {"config": self.cfg.summary(), "rows": rows})

    # oracle
    def oracle(self) -> int:
        ref = solve_bvp(self.gen, self.terminal, self.cfg.barrier, grid_size=self.cfg.bvp_grid_size,
                        tol=self.cfg.bvp_tol)
        Helpers.write_json(self.artifact("oracle", ".json"), {
            "u0": ref.u0,
            "a": ref.a,
            "grid_size": int(ref.grid.size),
            "residual": ref.residual,
            "newton_iterations": ref.newton_iterations,
            "generator": self.gen.name,
            "terminal": self.terminal.name,
        })
        self._update(f"oracle: u0={ref.u0:.12g} ({ref.newton_iterations} Newton steps)")
        return EXIT_OK

    # verify
    def verify(self) -> int:
        failed = []
        frames = []
        for n in self.cfg.n_list:
            def record(result, n=n):
                status = "SKIPPED" if result.skipped else ("PASSED" if result.passed else "FAILED")
                print(f"n={n:<5d} {result.check_id:<24s} residual={result.residual:.3e} "
                      f"threshold={result.threshold:.1e} {status}")
                if self.ledger and not result.skipped:
                    self.ledger.add_log_check(result.check_id, residual=result.residual,
                                              threshold=result.threshold, passed=result.passed, n=n,
                                              comment=result.comment or None)

            report = run_checks(self.gen, self.terminal, self.cfg.barrier, n, self.cfg.cap, seed=self.cfg.seed,
                                cfg=self.cfg.node_config(), two_sided=self.cfg.two_sided,
                                picard_tol=self.cfg.picard_tol, p_max=self.cfg.p_max, on_result=record)
            failed.extend(f"{c}@n={n}" for c in report.failed)
            frames.append(report.to_frame())
        pd.concat(frames, ignore_index=True).to_csv(self.artifact("verify", ".csv"), index=False,
                                                    float_format="%.17g", lineterminator="\n")
        if failed:
            print(f"FAILED checks: {', '.join(failed)}")
            return EXIT_VERIFY_FAILED
        print("all checks passed")
        return EXIT_OK

    # converge
    def converge(self) -> int:
        ref = solve_bvp(self.gen, self.terminal, self.cfg.barrier, grid_size=self.cfg.bvp_grid_size,
                        tol=self.cfg.bvp_tol)
        report = convergence_sweep(self.cfg.n_list, self.gen, self.terminal, self.cfg.barrier, self.cfg.cap, ref,
                                   self.cfg.node_config(), threads=self.threads, two_sided=self.cfg.two_sided,
                                   horizon=self.cfg.node_error_horizon())
        report.meta.update({"seed": self.cfg.seed, "config": self.cfg.source})
        report.to_csv(self.artifact("convergence", ".csv"))
        report.to_json(self.artifact("convergence", ".json"))
        report.to_xlsx(self.artifact("convergence", ".xlsx"))
        for r in report.records:
            self._update(f"converge n={r.n}: Y0 error {r.Y0_error:.4g}, sup node {r.sup_node_error:.4g}, "
                         f"z L2 {r.z_l2_error:.4g}")
        return EXIT_OK


def main(argv=None) -> int:
    Helpers.configure_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.from_file(args.config, seed_override=args.seed_override)
    except ConfigValidationError as e:
        print(f"config error in '{e.field}': {e.message}")
        return EXIT_CONFIG

    out_dir = Config.setup_directories(args.out)
    threads = args.threads or Config.get_threads()
    ledger = ConfigAssists(Config.get_db_path(out_dir))
    ledger.start_run(
        command=args.command,
        scheme=cfg.scheme,
        config_path=cfg.source,
        generator=str(cfg.generator),
        terminal=str(cfg.terminal),
        n_values=cfg.n_list,
        seed=cfg.seed,
        threads=threads,
        other_info={"out_dir": str(out_dir), "report_name": cfg.report_name},
    )
    controller = LabController(cfg, out_dir, threads, ledger)
    try:
        code = getattr(controller, args.command)()
    except LabError as e:
        print(f"{type(e).__name__}: {e}")
        ledger.add_log_error(f"{type(e).__name__}: {e}")
        ledger.finish_run("ERR")
        ledger.db.close()
        return EXIT_SOLVER
    ledger.finish_run("PASS" if code == EXIT_OK else "FAIL")
    ledger.db.close()
    return code

