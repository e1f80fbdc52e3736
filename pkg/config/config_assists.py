import uuid
from dataclasses import dataclass
from datetime import datetime

from config.labdb import LabDB


@dataclass
class RunConfiguration:
    prefix: str = "ETBSDE"
    run_id: str | None = None
    command: str | None = None
    scheme: str | None = None
    config_path: str | None = None
    generator: str | None = None
    terminal: str | None = None
    n_values: str | None = None
    seed: int | None = None
    unique_id: str | None = None
    threads: int = 1
    started_at: str | None = None
    test_name: str | None = None
    other_info: dict | None = None


class ConfigAssists:

    def __init__(self, db_path=None):
        self.db = LabDB(db_path)
        self.run_config: RunConfiguration | None = None
        self.set_run_configuration(RunConfiguration())

    # Run configuration interactors
    def set_run_configuration(self, run_config: RunConfiguration):
        self.run_config = run_config

    def set_unique_id(self):
        if self.run_config:
            self.run_config.unique_id = str(uuid.uuid4())

    def set_test_name(self, test_name: str | None):
        if self.run_config:
            self.run_config.test_name = test_name

    def create_run_id(self):
        if self.run_config:
            parts = [
                self.run_config.prefix,
                self.run_config.scheme or "SCHEME",
                self.run_config.command or "CMD",
                self.run_config.started_at or "TIME",
                self.run_config.unique_id or "UID"
            ]
            self.run_config.run_id = "_".join(parts)
            return self.run_config.run_id
        return None

    def start_run(self, *, command: str, scheme: str, config_path: str | None = None, generator: str | None = None,
                  terminal: str | None = None, n_values=None, seed: int | None = None, threads: int = 1,
                  other_info: dict | None = None) -> str:
        """Fill the run configuration, create the run id and insert the run row."""
        rc = self.run_config or RunConfiguration()
        rc.command = command
        rc.scheme = scheme
        rc.config_path = config_path
        rc.generator = generator
        rc.terminal = terminal
        rc.n_values = ",".join(str(n) for n in n_values) if n_values else None
        rc.seed = seed
        rc.threads = threads
        rc.other_info = other_info
        rc.started_at = datetime.now().strftime("%Y%m%d%H%M%S")
        self.set_run_configuration(rc)
        self.set_unique_id()
        self.create_run_id()
        self.db.insert_run(rc)
        self.add_log_start(f"{command} started")
        return rc.run_id

    def finish_run(self, status: str) -> None:
        rc = self._require_rc()
        self.add_log_end(f"{rc.command} finished with status {status}", status=status)
        self.db.finish_run(rc.run_id, status)

    def _require_rc(self) -> RunConfiguration:
        if not self.run_config:
            raise RuntimeError("RunConfiguration is not initialized on ConfigAssists.")
        if not self.run_config.run_id:
            raise RuntimeError("run_id is missing. Create/load run_id once per session.")
        return self.run_config

    def _log(self, *, type_: str, message: str, status: str = "Info", test_name: str | None = None, mark_fail: bool = False, time_taken_ms: int | None = None,
             comment: str | None = None, check_id: str | None = None, n: int | None = None,
             residual: float | None = None, threshold: float | None = None) -> None:
        rc = self._require_rc()

        # Pick test name: explicit > rc.test_name
        tn = test_name or rc.test_name

        self.db.insert_run_log(
            run_id=rc.run_id,
            type_=type_,
            status=status,
            message=message,
            check_id=check_id,
            scheme=rc.scheme,
            test_name=tn,
            n=n,
            residual=residual,
            threshold=threshold,
            time_taken_ms=time_taken_ms,
            comment=comment,
        )

        if mark_fail:
            self.db.mark_check_failure(rc.run_id, message=message)

    # test facing helpers
    def add_log_start(self, message: str = "Run started", *, status: str = "Info") -> None:
        self._log(type_="start", message=message, status=status)

    def add_log_test_case(self, message: str, *, status: str = "Info", time_taken_ms=None, comment=None,
                          test_case_id="N/A") -> None:
        self._log(type_="test_case", check_id=test_case_id, message=message, status=status,
                  time_taken_ms=time_taken_ms, comment=comment, mark_fail=status == "FAILED")

    def add_log_check(self, check_id: str, *, residual: float, threshold: float, passed: bool, n: int | None = None,
                      comment: str | None = None) -> None:
        status = "PASSED" if passed else "FAILED"
        self._log(type_="check", check_id=check_id, n=n, residual=residual, threshold=threshold, status=status,
                  message=f"{check_id}: residual {residual:.3e} vs threshold {threshold:.1e}", comment=comment,
                  mark_fail=not passed)

    def add_log_update(self, message: str, *, status: str = "Success") -> None:
        self._log(type_="update", message=message, status=status)

    def add_log_end(self, message: str = "Run finished", *, status: str = "Success") -> None:
        self._log(type_="end", message=message, status=status)

    def add_log_skip(self, message: str, *, status: str = "Skipped") -> None:
        self._log(type_="force_skip", message=message, status=status)

    def add_log_error(self, message: str, *, status: str = "Error") -> None:
        self._log(type_="error", message=message, status=status, mark_fail=True)

