"""
Configuration management for the lab.
"""

import os
from pathlib import Path


class Config:
    """Configuration class for lab settings."""

    # Output directory; the --out flag wins over this
    OUT_DIR = Path(os.getenv("ETBSDE_OUT_DIR", "etbsde_out"))

    # Ledger path. Empty means "<out dir>/etbsde_ledger.db"
    DB_PATH = os.getenv("ETBSDE_DB_PATH", "")

    # Lanes for n-value sweeps
    DEFAULT_THREADS = int(os.getenv("ETBSDE_THREADS", "1"))

    # Node fixed point
    FIXED_POINT_TOL = float(os.getenv("ETBSDE_FIXED_POINT_TOL", "1e-14"))
    MAX_ITERS = int(os.getenv("ETBSDE_MAX_ITERS", "200"))

    # Size guards
    MAX_STEPS = int(os.getenv("ETBSDE_MAX_STEPS", str(2**31 - 1)))
    ENUM_MAX_STEPS = int(os.getenv("ETBSDE_ENUM_MAX_STEPS", "24"))

    # Logging settings
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")

    @classmethod
    def get_out_dir(cls, override: str | Path | None = None) -> Path:
        return Path(override) if override else cls.OUT_DIR

    @classmethod
    def get_db_path(cls, out_dir: str | Path | None = None) -> Path:
        if cls.DB_PATH:
            return Path(cls.DB_PATH)
        return cls.get_out_dir(out_dir) / "etbsde_ledger.db"

    @classmethod
    def get_threads(cls) -> int:
        return max(1, cls.DEFAULT_THREADS)

    @classmethod
    def get_log_level(cls) -> str:
        return cls.LOG_LEVEL

    @classmethod
    def setup_directories(cls, out_dir: str | Path | None = None) -> Path:
        out = cls.get_out_dir(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        return out
