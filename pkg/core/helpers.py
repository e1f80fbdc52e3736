"""
Helper utility functions shared by the CLI, the reports and the tests.
"""

import json
import logging
import math
import re
from datetime import datetime
from pathlib import Path
from typing import Dict, Iterable, Sequence

from openpyxl import Workbook
from openpyxl.styles import Font

from core.config import Config

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(message)s"
LOG_DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


class Helpers:
    """Collection of utility helper functions."""

    @staticmethod
    def configure_logging(level: str | None = None):
        """
        Install the console handler used by every lab module.

        Args:
            level: Level name; Config.LOG_LEVEL when omitted
        """
        logging.basicConfig(
            level=(level or Config.get_log_level()).upper(),
            format=LOG_FORMAT,
            datefmt=LOG_DATE_FORMAT,
            force=True,
        )

    @staticmethod
    def timestamp() -> str:
        return datetime.now().strftime("%Y%m%d_%H%M%S")

    @staticmethod
    def output_file(out_dir, name: str, suffix: str) -> Path:
        """
        Path of an artifact inside the output directory (created if missing).

        Args:
            out_dir: Output directory
            name: File stem
            suffix: Extension including the dot

        Returns:
            Path to the artifact
        """
        out = Config.setup_directories(out_dir)
        return out / f"{name}{suffix}"

    @staticmethod
    def write_json(path, payload: dict) -> Path:
        """Write payload as indented JSON; non-finite floats become null."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as f:
            json.dump(Helpers.json_safe(payload), f, indent=2, sort_keys=True)
            f.write("\n")
        return path

    @staticmethod
    def json_safe(value):
        if isinstance(value, dict):
            return {str(k): Helpers.json_safe(v) for k, v in value.items()}
        if isinstance(value, (list, tuple)):
            return [Helpers.json_safe(v) for v in value]
        if hasattr(value, "item") and not isinstance(value, (str, bytes)):
            value = value.item()
        if isinstance(value, float) and not math.isfinite(value):
            return None
        return value

    @staticmethod
    def does_file_have_data(file_path):
        """
        Check if a file has data (is not empty).

        Args:
            file_path: Path to the file
        Returns:
            True if file has data, False if empty
        """
        path = Path(file_path)
        return path.exists() and path.stat().st_size > 0

    @staticmethod
    def sanitize_sheet_name(name: str) -> str:
        # Excel rules: max 31 chars, no : \ / ? * [ ]
        name = (name or "").strip()
        if not name:
            name = "NO_NAME"
        name = re.sub(r"[:\\/?*\[\]]", "_", name)
        name = re.sub(r"\s+", " ", name).strip()
        return name[:31]

    @staticmethod
    def unique_sheet_title(wb: Workbook, base: str) -> str:
        base = Helpers.sanitize_sheet_name(base)
        if base not in wb.sheetnames:
            return base
        # add suffixes, keeping within 31 chars
        i = 2
        while True:
            suffix = f"_{i}"
            candidate = f"{base[: 31 - len(suffix)]}{suffix}"
            if candidate not in wb.sheetnames:
                return candidate
            i += 1

    @staticmethod
    def write_xlsx(path, sheets: Dict[str, tuple[Sequence[str], Iterable[Sequence]]]) -> Path:
        """
        Write one worksheet per entry with a bold header row.

        Args:
            path: Target .xlsx file
            sheets: sheet name -> (header, rows)

        Returns:
            Path to the workbook
        """
        header_font = Font(bold=True)
        wb = Workbook()
        wb.remove(wb.active)
        for name, (header, rows) in sheets.items():
            ws = wb.create_sheet(Helpers.unique_sheet_title(wb, name))
            for c, h in enumerate(header, start=1):
                ws.cell(row=1, column=c, value=h).font = header_font
            for row in rows:
                ws.append([Helpers.json_safe(v) for v in row])
        if not wb.sheetnames:
            wb.create_sheet("NO_DATA")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        wb.save(path)
        return path
