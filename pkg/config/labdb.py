import json
import sqlite3
from pathlib import Path

from core.config import Config

'''
Run ledger of the lab: one row per CLI or test-session run, and one row per
logged event (start, check, update, error, end) of that run.
'''

_PRAGMAS = (
    "PRAGMA foreign_keys = ON;",
    "PRAGMA journal_mode = WAL;",
    "PRAGMA synchronous = NORMAL;",
    "PRAGMA busy_timeout = 30000;",
)

_SCHEMA = """
CREATE TABLE IF NOT EXISTS experiment_runs (
  id INTEGER PRIMARY KEY AUTOINCREMENT,
  run_id TEXT NOT NULL UNIQUE,
  prefix TEXT NOT NULL DEFAULT 'ETBSDE',
  command TEXT NOT NULL,
  scheme TEXT NOT NULL,
  config_path TEXT,
  generator TEXT,
  terminal TEXT,
  n_values TEXT,
  seed INTEGER,
  threads INTEGER NOT NULL DEFAULT 1,
  started_at TEXT NOT NULL,
  ended_at TEXT,
  status TEXT NOT NULL DEFAULT 'RUNNING',
  failed_checks INTEGER NOT NULL DEFAULT 0,
  last_heartbeat_at TEXT,
  last_update_at TEXT,
  last_update_message TEXT,
  unique_id TEXT NOT NULL,
  other_info_json TEXT
);

CREATE INDEX IF NOT EXISTS idx_experiment_runs_status ON experiment_runs(status);

CREATE TABLE IF NOT EXISTS run_logs (
  id INTEGER PRIMARY KEY AUTOINCREMENT,
  run_id TEXT NOT NULL,
  check_id TEXT,
  type TEXT NOT NULL,
  scheme TEXT,
  test_name TEXT,
  n INTEGER,
  residual REAL,
  threshold REAL,
  status TEXT,
  message TEXT,
  timestamp TEXT NOT NULL DEFAULT (CURRENT_TIMESTAMP),
  time_taken_ms INTEGER,
  comment TEXT,
  FOREIGN KEY (run_id) REFERENCES experiment_runs(run_id) ON DELETE CASCADE
);

CREATE INDEX IF NOT EXISTS idx_run_logs_run_type ON run_logs(run_id, type);
"""

_RUN_COLUMNS = ("run_id", "prefix", "command", "scheme", "config_path", "generator", "terminal", "n_values",
                "seed", "threads", "started_at", "unique_id")

_LOG_COLUMNS = ("run_id", "check_id", "type", "scheme", "test_name", "n", "residual", "threshold", "status",
                "message", "time_taken_ms", "comment")

# statuses a later check failure must not overwrite
_FINAL_ERROR_STATUSES = ("ERR",)


class LabDB:

    def __init__(self, db_path: str | Path | None = None):
        self.db_path = Path(db_path).resolve() if db_path else Config.get_db_path().resolve()
        self.db_path.parent.mkdir(parents=True, exist_ok=True)
        self.connection = sqlite3.connect(str(self.db_path), timeout=5)
        for pragma in _PRAGMAS:
            self.connection.execute(pragma)
        with self.connection:
            self.connection.executescript(_SCHEMA)

    def _execute(self, query: str, params=()) -> None:
        with self.connection:
            self.connection.execute(query, params)

    def _select(self, query: str, params=()) -> list[dict]:
        cursor = self.connection.execute(query, params)
        cols = [d[0] for d in cursor.description]
        return [dict(zip(cols, row)) for row in cursor.fetchall()]

    def check_if_table_exists(self, table_name: str) -> bool:
        return bool(self._select("SELECT name FROM sqlite_master WHERE type = 'table' AND name = ?;", (table_name,)))

    def run_query(self, query, params=()):
        """Run an ad-hoc query and return all rows as tuples."""
        with self.connection:
            return self.connection.execute(query, params).fetchall()

    def close(self):
        self.connection.close()

    def insert_run(self, rc) -> None:
        """Insert the run row of a RunConfiguration, or refresh it when the run id already exists."""
        values = [getattr(rc, col) for col in _RUN_COLUMNS]
        other = json.dumps(rc.other_info or {}, ensure_ascii=False, sort_keys=True)
        columns = ", ".join(_RUN_COLUMNS)
        placeholders = ", ".join("?" for _ in _RUN_COLUMNS)
        refreshed = ", ".join(f"{col}=excluded.{col}" for col in _RUN_COLUMNS[2:10])
        self._execute(
            f"""
            INSERT INTO experiment_runs ({columns}, other_info_json,
                                         last_heartbeat_at, last_update_at, last_update_message)
            VALUES ({placeholders}, ?, CURRENT_TIMESTAMP, CURRENT_TIMESTAMP, 'Run created')
            ON CONFLICT(run_id) DO UPDATE SET {refreshed},
              last_update_at=CURRENT_TIMESTAMP,
              last_update_message='Run updated by controller'
            """,
            (*values, other),
        )

    def get_run_row(self, run_id: str) -> dict | None:
        rows = self._select("SELECT * FROM experiment_runs WHERE run_id = ?;", (run_id,))
        return rows[0] if rows else None

    def get_run_logs(self, run_id: str, type_: str | None = None) -> list[dict]:
        if type_ is None:
            return self._select("SELECT * FROM run_logs WHERE run_id = ? ORDER BY id;", (run_id,))
        return self._select("SELECT * FROM run_logs WHERE run_id = ? AND type = ? ORDER BY id;", (run_id, type_))

    def insert_run_log(self, run_id: str, type_: str, status: str, message: str, **fields) -> None:
        """
        Append one event to run_logs and bump the run's heartbeat.

        Optional keyword fields: check_id, scheme, test_name, n, residual,
        threshold, time_taken_ms, comment.
        """
        unknown = set(fields) - set(_LOG_COLUMNS)
        if unknown:
            raise ValueError(f"unknown run_logs columns: {sorted(unknown)}")
        row = dict(fields, run_id=run_id, type=type_, status=status, message=message)
        values = tuple(row.get(col) for col in _LOG_COLUMNS)
        with self.connection:
            self.connection.execute(
                f"INSERT INTO run_logs ({', '.join(_LOG_COLUMNS)}) VALUES ({', '.join('?' for _ in _LOG_COLUMNS)});",
                values,
            )
            self.connection.execute(
                """
                UPDATE experiment_runs
                SET last_heartbeat_at = CURRENT_TIMESTAMP, last_update_at = CURRENT_TIMESTAMP,
                    last_update_message = ?
                WHERE run_id = ?;
                """,
                (message[:250], run_id),
            )

    def mark_check_failure(self, run_id: str, message: str = "Check failed") -> None:
        sticky = ", ".join(f"'{s}'" for s in _FINAL_ERROR_STATUSES)
        self._execute(
            f"""
            UPDATE experiment_runs
            SET failed_checks = failed_checks + 1,
                status = CASE WHEN status IN ({sticky}) THEN status ELSE 'FAIL' END,
                last_update_at = CURRENT_TIMESTAMP, last_update_message = ?
            WHERE run_id = ?;
            """,
            (message[:250], run_id),
        )

    def finish_run(self, run_id: str, final_status: str) -> None:
        self._execute(
            """
            UPDATE experiment_runs
            SET ended_at = CURRENT_TIMESTAMP, status = ?, last_update_at = CURRENT_TIMESTAMP,
                last_update_message = 'Run finished'
            WHERE run_id = ?;
            """,
            (final_status, run_id),
        )

    def failed_check_count(self, run_id: str) -> int:
        rows = self._select("SELECT failed_checks FROM experiment_runs WHERE run_id = ?;", (run_id,))
        return int(rows[0]["failed_checks"]) if rows else 0
