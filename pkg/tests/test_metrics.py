import math

import numpy as np
import pytest
from openpyxl import load_workbook

from core.errors import InputError
from schemes.generators import linear_generator, parse_generator, parse_terminal, zero_generator
from schemes.lattice_solver import backward_solve
from schemes.metrics import (
    CSV_FIELDS,
    ConvergenceRecord,
    ConvergenceReport,
    bootstrap_stderr,
    continuous_absorb_level,
    convergence_sweep,
    martingale_convergence_diag,
    martingale_residual,
    qv_residual,
    sup_node_error,
    sup_process_distance,
    z_l2_distance,
)
from schemes.oracle import closed_form_linear, solve_bvp
from schemes.paths import Lattice
from schemes.stopping import StoppingRule

LINEAR_G = parse_terminal("linear:2,1")
EXP = parse_terminal("exp")
EXP_DRIVER = linear_generator(-1, 0, 0)


def _lattice_solution(gen, terminal, n, a=0.5, cap=2.0):
    rule = StoppingRule.aligned(a, n, cap)
    return backward_solve(Lattice(n=n, depth=rule.cap_steps(n)), gen, terminal, rule)


@pytest.mark.MetricsPackage
class TestDistances:

    @pytest.mark.smoke
    def test_shifted_process(self):
        """M_01_01: y = x + c is at sup distance |c|."""
        x = np.linspace(0, 1, 11)
        assert sup_process_distance(x, x + 0.25, 1.0) == pytest.approx(0.25, abs=1e-15)

    def test_horizon_restricts_grid(self):
        """M_01_02: only grid points up to L count."""
        grid = np.array([0.0, 0.5, 1.0, 1.5])
        x, y = np.zeros(4), np.array([0.0, 0.1, 0.2, 5.0])
        assert sup_process_distance(x, y, 1.0, grid) == pytest.approx(0.2)

    def test_mismatch(self):
        """M_01_03: shapes must agree."""
        with pytest.raises(InputError):
            sup_process_distance(np.zeros(3), np.zeros(4), 1.0)
        with pytest.raises(InputError):
            sup_process_distance(np.zeros(3), np.zeros(3), 1.0, grid=np.zeros(2))

    def test_absorb_level(self):
        """M_01_04: the continuous exit level is the first index at or beyond a sqrt(n)."""
        assert continuous_absorb_level(0.5, 4) == 1
        assert continuous_absorb_level(0.5, 16) == 2
        assert continuous_absorb_level(0.6, 16) == 3

    def test_linear_terminal_is_exact(self):
        """M_01_05: f = 0 with linear g: lattice y and z match u and u' exactly."""
        ref = solve_bvp(zero_generator(), LINEAR_G, 0.5)
        sol = _lattice_solution(zero_generator(), LINEAR_G, 16)
        assert sup_node_error(sol, ref) < 1e-9
        assert z_l2_distance(sol, ref) < 1e-16

    def test_node_error_horizon(self):
        """M_01_07: horizon 0 keeps only the root node; inf takes every active node."""
        ref = solve_bvp(EXP_DRIVER, EXP, 0.5)
        sol = _lattice_solution(EXP_DRIVER, EXP, 16)
        assert sup_node_error(sol, ref, 0.0) == pytest.approx(abs(sol.y0 - ref.u0), abs=1e-15)
        half = sup_node_error(sol, ref)
        assert sup_node_error(sol, ref, 1.0) == half
        assert sup_node_error(sol, ref, math.inf) >= half

    def test_z_shape(self):
        """M_01_06: an explicit z must have the lattice shape."""
        ref = solve_bvp(zero_generator(), LINEAR_G, 0.5)
        sol = _lattice_solution(zero_generator(), LINEAR_G, 4)
        with pytest.raises(InputError):
            z_l2_distance(sol, ref, z=np.zeros((2, 2)))


@pytest.mark.MetricsPackage
class TestIdentities:

    def test_constant_terminal_has_no_bracket(self):
        """M_02_01: constant xi with f = 0 gives M constant and zero bracket."""
        sol = _lattice_solution(zero_generator(), parse_terminal("constant:3"), 4)
        assert qv_residual(sol) == 0.0
        assert martingale_residual(sol) == 0.0

    def test_qv_with_fresh_driver(self, lab_seed):
        """M_02_02: the bracket identity holds when M is rebuilt from the driver, sampled and enumerated."""
        gen = parse_generator("linear:-1,0,0+sin-z")
        small = _lattice_solution(gen, parse_terminal("exp"), 4, cap=4.0)
        large = _lattice_solution(gen, parse_terminal("exp"), 16, cap=2.0)
        assert qv_residual(small, gen) < 1e-12
        assert qv_residual(large, gen, samples=500, seed=lab_seed) < 1e-12

    def test_martingale_diag_linear(self):
        """M_02_03: harmonic xi makes the lattice conditional expectation equal u(W)."""
        diag = martingale_convergence_diag(LINEAR_G, [4, 16], 0.5, 2.0, samples=200)
        assert set(diag) == {4, 16}
        assert max(diag.values()) < 1e-9

    def test_martingale_diag_exp(self):
        """M_02_05: xi = exp: the gap of the lattice conditional expectation to u shrinks from n=16 to 256."""
        diag = martingale_convergence_diag(EXP, [16, 256], 0.5, 2.0, samples=500)
        assert diag[256] < diag[16]

    def test_bootstrap(self, lab_seed):
        """M_02_04: constant samples have zero spread; the stderr scales like 1/sqrt(N)."""
        assert bootstrap_stderr(np.ones(50), 100, lab_seed) == 0.0
        samples = np.random.default_rng(lab_seed).normal(size=4000)
        assert bootstrap_stderr(samples, 300, lab_seed) == pytest.approx(1 / math.sqrt(4000), rel=0.25)
        with pytest.raises(InputError):
            bootstrap_stderr([1.0], 100)
        with pytest.raises(InputError):
            bootstrap_stderr([1.0, 2.0], 1)


@pytest.mark.MetricsPackage
class TestConvergenceReport:

    @pytest.mark.acceptance
    def test_error_decreases_in_n(self, config_assists, tmp_path):
        """
        Feature - M_03_Convergence
        Test Cases -
         M_03_01: f=-y, xi=exp, a=0.5: Y0 error against the elliptic reference decreases over n = 4, 16, 64.
         M_03_02: the CSV report is byte-identical on a rerun.
        """
        failed_cases = 0
        gen, terminal = linear_generator(-1, 0, 0), parse_terminal("exp")
        ref = solve_bvp(gen, terminal, 0.5)
        report = convergence_sweep([4, 16, 64], gen, terminal, 0.5, 8.0, ref, threads=2)
        assert report.column("n") == [4, 16, 64]
        if report.strictly_decreasing("Y0_error"):
            config_assists.add_log_test_case("Y0 error decreasing", test_case_id="M_03_01", status="PASSED",
                                             comment=str(report.column("Y0_error")))
        else:
            failed_cases += 1
            config_assists.add_log_test_case("Y0 error decreasing", test_case_id="M_03_01", status="FAILED",
                                             comment=str(report.column("Y0_error")))

        first = report.to_csv(tmp_path / "a.csv").read_bytes()
        rerun = convergence_sweep([4, 16, 64], gen, terminal, 0.5, 8.0, ref, threads=1)
        second = rerun.to_csv(tmp_path / "b.csv").read_bytes()
        status = "PASSED" if first == second else "FAILED"
        failed_cases += status == "FAILED"
        config_assists.add_log_test_case("CSV identical on rerun", test_case_id="M_03_02", status=status)
        assert failed_cases < 1

    def test_outputs(self, tmp_path):
        """M_03_03: CSV header, JSON records and the xlsx sheet."""
        records = [ConvergenceRecord(n=n, Y0_error=1.0 / n, sup_node_error=2.0 / n, z_l2_error=0.0,
                                     qv_residual=0.0, martingale_residual=0.0, runtime=0.5) for n in (4, 16)]
        report = ConvergenceReport(records=records, reference_u0=1.0, meta={"a": 0.5})
        csv_text = report.to_csv(tmp_path / "conv.csv").read_text()
        assert csv_text.splitlines()[0] == ",".join(CSV_FIELDS)
        assert "runtime" not in csv_text
        assert report.to_dict()["records"][1]["n"] == 16
        assert report.to_json(tmp_path / "conv.json").exists()
        ws = load_workbook(report.to_xlsx(tmp_path / "conv.xlsx"))["convergence"]
        assert [c.value for c in ws[1]] == list(CSV_FIELDS) + ["runtime"]
        assert ws.cell(row=3, column=1).value == 16
        assert report.strictly_decreasing("Y0_error")

    def test_empty_sweep(self):
        """M_03_04: an empty n-list is rejected."""
        ref = solve_bvp(zero_generator(), LINEAR_G, 0.5)
        with pytest.raises(InputError):
            convergence_sweep([], zero_generator(), LINEAR_G, 0.5, 1.0, ref)

    def test_sweep_rejects_bad_horizon(self):
        """M_03_05: a sup-node horizon must be positive."""
        ref = solve_bvp(zero_generator(), LINEAR_G, 0.5)
        with pytest.raises(InputError):
            convergence_sweep([4], zero_generator(), LINEAR_G, 0.5, 1.0, ref, horizon=0.0)

    def test_z_error_decreases(self):
        """M_03_06: f=-y, xi=exp: the z L2 error decreases over n = 16, 64, 256."""
        ref = solve_bvp(EXP_DRIVER, EXP, 0.5)
        report = convergence_sweep([16, 64, 256], EXP_DRIVER, EXP, 0.5, 2.0, ref, samples=200)
        assert report.strictly_decreasing("z_l2_error"), report.column("z_l2_error")


@pytest.mark.MetricsPackage
class TestLinearDriverStudy:

    @pytest.mark.slow
    @pytest.mark.acceptance
    def test_errors_against_elliptic_reference(self, config_assists):
        """
        Feature - M_04_Linear_Driver_Study
        Test Cases -
         M_04_01: f=-y+1, xi=exp, a=0.5: |Y0 - u0| strictly decreases over n = 16, 64, 256, 1024.
         M_04_02: at n=1024, |Y0 - u0| < 0.02 (|u0| + 1).
         M_04_03: the sup-node error strictly decreases and ends below half its first value.
         M_04_04: the z L2 error strictly decreases and ends below half its first value.
         M_04_05: without the constant the Newton reference matches the cosh closed form within 1e-8.
        """
        failed_cases = 0
        gen = linear_generator(-1, 0, 1)
        ref = solve_bvp(gen, EXP, 0.5)
        report = convergence_sweep([16, 64, 256, 1024], gen, EXP, 0.5, 4.0, ref, threads=2, samples=200)

        errors = report.column("Y0_error")
        status = "PASSED" if report.strictly_decreasing("Y0_error") else "FAILED"
        failed_cases += status == "FAILED"
        config_assists.add_log_test_case("Y0 error decreasing", test_case_id="M_04_01", status=status,
                                         comment=str([f"{e:.4g}" for e in errors]))

        bound = 0.02 * (abs(ref.u0) + 1)
        status = "PASSED" if errors[-1] < bound else "FAILED"
        failed_cases += status == "FAILED"
        config_assists.add_log_test_case("Y0 error at n=1024", test_case_id="M_04_02", status=status,
                                         comment=f"{errors[-1]:.4g} against {bound:.4g}, u0 {ref.u0:.6f}")

        for case_id, name in (("M_04_03", "sup_node_error"), ("M_04_04", "z_l2_error")):
            values = report.column(name)
            shrinking = report.strictly_decreasing(name) and values[-1] < values[0] / 2
            status = "PASSED" if shrinking else "FAILED"
            failed_cases += status == "FAILED"
            config_assists.add_log_test_case(f"{name} decreasing", test_case_id=case_id, status=status,
                                             comment=str([f"{v:.3g}" for v in values]))

        linear = solve_bvp(EXP_DRIVER, EXP, 0.5, grid_size=20001)
        u, _ = closed_form_linear(1.0, 0.0, 0.5, math.exp(-0.5), math.exp(0.5))
        gap = float(np.max(np.abs(linear.u - u(linear.grid))))
        status = "PASSED" if gap < 1e-8 else "FAILED"
        failed_cases += status == "FAILED"
        config_assists.add_log_test_case("Newton vs cosh closed form", test_case_id="M_04_05", status=status,
                                         comment=f"max gap {gap:.3e}")
        assert failed_cases < 1
