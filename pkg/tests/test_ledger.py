import json
import math

import pytest
from openpyxl import load_workbook

from config.config_assists import ConfigAssists
from config.labdb import LabDB
from core.config import Config
from core.helpers import Helpers


@pytest.fixture
def assists(tmp_path):
    ca = ConfigAssists(tmp_path / "ledger.db")
    yield ca
    ca.db.close()


@pytest.mark.LedgerPackage
class TestLedger:

    @pytest.mark.smoke
    def test_tables_created(self, tmp_path):
        """LG_01_01: a fresh ledger has the run and log tables."""
        db = LabDB(tmp_path / "fresh.db")
        try:
            assert db.check_if_table_exists("experiment_runs")
            assert db.check_if_table_exists("run_logs")
            assert not db.check_if_table_exists("registries")
        finally:
            db.close()

    def test_start_and_finish(self, assists):
        """LG_01_02: start_run inserts a RUNNING row; finish_run stamps the final status."""
        run_id = assists.start_run(command="run", scheme="lattice", generator="zero", n_values=[4, 16], seed=7)
        row = assists.db.get_run_row(run_id)
        assert row["status"] == "RUNNING"
        assert row["n_values"] == "4,16" and row["seed"] == 7
        assert run_id.startswith("ETBSDE_lattice_run_")
        assists.finish_run("PASS")
        row = assists.db.get_run_row(run_id)
        assert row["status"] == "PASS" and row["ended_at"] is not None
        types = [log["type"] for log in assists.db.get_run_logs(run_id)]
        assert types == ["start", "end"]

    def test_failed_check_marks_run(self, assists):
        """LG_01_03: a failed check counts against the run and flips it to FAIL."""
        run_id = assists.start_run(command="verify", scheme="lattice")
        assists.add_log_check("one_step_residual", residual=1e-15, threshold=1e-12, passed=True, n=4)
        assists.add_log_check("monotonicity", residual=3.0, threshold=1.0, passed=False, n=4)
        row = assists.db.get_run_row(run_id)
        assert row["failed_checks"] == 1 and row["status"] == "FAIL"
        assert assists.db.failed_check_count(run_id) == 1
        assert assists.db.failed_check_count("no-such-run") == 0
        checks = assists.db.get_run_logs(run_id, "check")
        assert [c["status"] for c in checks] == ["PASSED", "FAILED"]
        assert checks[1]["residual"] == 3.0 and checks[1]["n"] == 4

    def test_error_status_is_sticky(self, assists):
        """LG_01_04: once ERR, further failures leave the status alone."""
        run_id = assists.start_run(command="run", scheme="lsmc")
        assists.db.run_query("UPDATE experiment_runs SET status = 'ERR' WHERE run_id = ?", (run_id,))
        assists.add_log_error("RankError: design is singular")
        row = assists.db.get_run_row(run_id)
        assert row["status"] == "ERR" and row["failed_checks"] == 1

    def test_test_case_logging(self, assists):
        """LG_01_05: test cases carry their id and the current test name."""
        run_id = assists.start_run(command="pytest", scheme="tests")
        assists.set_test_name("test_something")
        assists.add_log_test_case("demo", test_case_id="LG_01_05", status="PASSED")
        log = assists.db.get_run_logs(run_id, "test_case")[0]
        assert log["check_id"] == "LG_01_05" and log["test_name"] == "test_something"
        assert assists.db.get_run_row(run_id)["failed_checks"] == 0

    def test_log_without_run(self, tmp_path):
        """LG_01_06: logging before start_run is an error."""
        ca = ConfigAssists(tmp_path / "empty.db")
        try:
            with pytest.raises(RuntimeError):
                ca.add_log_update("too early")
        finally:
            ca.db.close()


@pytest.mark.LedgerPackage
class TestHelpers:

    def test_json_safe(self, tmp_path):
        """LG_02_01: non-finite floats are written as null."""
        path = Helpers.write_json(tmp_path / "out.json", {"a": math.inf, "b": [1.0, math.nan], "c": 2})
        assert json.loads(path.read_text()) == {"a": None, "b": [1.0, None], "c": 2}

    def test_sheet_names(self):
        """LG_02_02: sheet names are cleaned and cut to 31 characters."""
        assert Helpers.sanitize_sheet_name("a/b:c") == "a_b_c"
        assert Helpers.sanitize_sheet_name("") == "NO_NAME"
        assert len(Helpers.sanitize_sheet_name("x" * 40)) == 31

    def test_write_xlsx(self, tmp_path):
        """LG_02_03: one sheet per entry with the header in the first row."""
        path = Helpers.write_xlsx(tmp_path / "book.xlsx", {"errors": (["n", "err"], [[4, 0.5], [16, 0.25]])})
        ws = load_workbook(path)["errors"]
        assert [c.value for c in ws[1]] == ["n", "err"]
        assert ws.cell(row=3, column=2).value == 0.25
        assert Helpers.does_file_have_data(path)
        assert not Helpers.does_file_have_data(tmp_path / "missing.xlsx")


@pytest.mark.LedgerPackage
class TestConfig:

    def test_db_path_follows_out_dir(self, tmp_path, monkeypatch):
        """LG_03_01: an empty ETBSDE_DB_PATH puts the ledger in the output directory."""
        monkeypatch.setattr(Config, "DB_PATH", "")
        assert Config.get_db_path(tmp_path) == tmp_path / "etbsde_ledger.db"
        monkeypatch.setattr(Config, "DB_PATH", str(tmp_path / "elsewhere.db"))
        assert Config.get_db_path(tmp_path) == tmp_path / "elsewhere.db"

    def test_directories_only_on_request(self, tmp_path, monkeypatch):
        """LG_03_02: the output directory is created by setup_directories and nothing else."""
        out = tmp_path / "out"
        monkeypatch.setattr(Config, "OUT_DIR", out)
        assert not out.exists()
        assert Config.setup_directories() == out
        assert out.is_dir()

    def test_settings_are_lab_only(self):
        """LG_03_03: every path setting is an output or ledger location."""
        paths = [k for k, v in vars(Config).items() if k.isupper() and isinstance(v, type(Config.OUT_DIR))]
        assert paths == ["OUT_DIR"]
        assert not hasattr(Config, "ETBSDE_DATA_DIR")
