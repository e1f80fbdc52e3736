"""
JSON experiment configuration.

Keys and defaults:

    scheme               "lattice"       lattice | picard | lsmc | oracle-only
    generator            "zero"          preset, '+'-sum of presets, or {"expr", "K", "mu", "bound"}
    terminal             "exp"           preset or {"expr", "bound"}
    barrier              0.5             a > 0; lattice barriers are aligned to (floor(a sqrt n) + 1/2) / sqrt n
    two_sided            true
    cap                  4.0             cap on tau^n
    n_list               [4]             strictly increasing lattice scales
    mesh_levels          [6]             lsmc: dyadic subdivision levels (mesh 2**-level), increasing
    fine_level           null            lsmc: fine-grid level, max(mesh_levels) when null
    path_count           10000           lsmc paths
    basis                {"kind": "polynomial", "degree": 4}   or {"kind": "bins", "bins": 20}
    seed                 0
    fixed_point_tol      1e-14
    max_iters            200
    picard_tol           1e-12
    p_max                60
    bvp_grid_size        2001
    bvp_tol              1e-10
    bootstrap_resamples  200
    sup_node_horizon     null            converge: node times counted by sup_node_error; null is cap/2, "all" every node
    report_name          "etbsde"        stem of every artifact written to the output directory
"""

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from core.config import Config
from core.errors import ConfigValidationError, LabError
from schemes.generators import Generator, TerminalCondition, parse_generator, parse_terminal
from schemes.lattice_solver import NodeSolveConfig
from schemes.lsmc import RegressionBasis
from schemes.paths import clock_steps

SCHEMES = ("lattice", "picard", "lsmc", "oracle-only")
_SEED_LIMIT = 2**64


@dataclass
class ExperimentConfig:
    scheme: str = "lattice"
    generator: Any = "zero"
    terminal: Any = "exp"
    barrier: float = 0.5
    two_sided: bool = True
    cap: float = 4.0
    n_list: list[int] = field(default_factory=lambda: [4])
    mesh_levels: list[int] = field(default_factory=lambda: [6])
    fine_level: int | None = None
    path_count: int = 10000
    basis: dict = field(default_factory=lambda: {"kind": "polynomial", "degree": 4})
    seed: int = 0
    fixed_point_tol: float = Config.FIXED_POINT_TOL
    max_iters: int = Config.MAX_ITERS
    picard_tol: float = 1e-12
    p_max: int = 60
    bvp_grid_size: int = 2001
    bvp_tol: float = 1e-10
    bootstrap_resamples: int = 200
    sup_node_horizon: Any = None
    report_name: str = "etbsde"
    source: str | None = None

    @classmethod
    def from_dict(cls, data: dict, seed_override: int | None = None, source: str | None = None) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigValidationError("<root>", "config must be a JSON object")
        known = {f.name for f in fields(cls)} - {"source"}
        for key in data:
            if key not in known:
                raise ConfigValidationError(key, "unknown key")
        cfg = cls(**data, source=source)
        if seed_override is not None:
            cfg.seed = seed_override
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path, seed_override: int | None = None) -> "ExperimentConfig":
        path = Path(path)
        try:
            with path.open("r", encoding="utf-8") as f:
                data = json.load(f)
        except FileNotFoundError as e:
            raise ConfigValidationError("--config", f"file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigValidationError("<root>", f"invalid JSON at line {e.lineno}: {e.msg}") from e
        return cls.from_dict(data, seed_override=seed_override, source=str(path))

    def validate(self) -> None:
        if self.scheme not in SCHEMES:
            raise ConfigValidationError("scheme", f"must be one of {SCHEMES}, got '{self.scheme}'")
        _positive_number("barrier", self.barrier)
        _positive_number("cap", self.cap)
        if not isinstance(self.two_sided, bool):
            raise ConfigValidationError("two_sided", "must be true or false")
        _increasing_ints("n_list", self.n_list, minimum=1)
        if clock_steps(self.cap, self.n_list[0]) < 1:
            raise ConfigValidationError("cap", f"must be at least one lattice step 1/{self.n_list[0]}, got {self.cap}")
        self.node_error_horizon()
        if self.scheme == "lsmc":
            _increasing_ints("mesh_levels", self.mesh_levels, minimum=0)
            if self.fine_level is not None:
                _int_at_least("fine_level", self.fine_level, max(self.mesh_levels))
            _int_at_least("path_count", self.path_count, 1)
            self.regression_basis()
        for name in ("fixed_point_tol", "picard_tol", "bvp_tol"):
            _positive_number(name, getattr(self, name))
        _int_at_least("max_iters", self.max_iters, 1)
        _int_at_least("p_max", self.p_max, 1)
        _int_at_least("bvp_grid_size", self.bvp_grid_size, 8)
        _int_at_least("bootstrap_resamples", self.bootstrap_resamples, 0)
        if self.bootstrap_resamples == 1:
            raise ConfigValidationError("bootstrap_resamples", "must be 0 (off) or >= 2")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or not 0 <= self.seed < _SEED_LIMIT:
            raise ConfigValidationError("seed", f"must be a 64-bit unsigned integer, got {self.seed!r}")
        if not isinstance(self.report_name, str) or not self.report_name.strip():
            raise ConfigValidationError("report_name", "must be a nonempty string")
        # driver and terminal parse errors surface as config errors
        self.driver()
        self.terminal_condition()

    def driver(self) -> Generator:
        try:
            return parse_generator(self.generator, "generator")
        except ConfigValidationError:
            raise
        except LabError as e:
            raise ConfigValidationError("generator", str(e)) from e

    def terminal_condition(self) -> TerminalCondition:
        try:
            return parse_terminal(self.terminal, "terminal")
        except ConfigValidationError:
            raise
        except LabError as e:
            raise ConfigValidationError("terminal", str(e)) from e

    def regression_basis(self) -> RegressionBasis:
        spec = self.basis
        if not isinstance(spec, dict):
            raise ConfigValidationError("basis", "must be an object")
        kind = spec.get("kind", "polynomial")
        key = "degree" if kind == "polynomial" else "bins"
        value = spec.get(key)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigValidationError("basis", f"'{key}' must be an integer")
        try:
            return RegressionBasis(kind=kind, degree_or_bins=value)
        except LabError as e:
            raise ConfigValidationError("basis", str(e)) from e

    def node_error_horizon(self) -> float | None:
        """Horizon handed to sup_node_error: None for cap/2, inf for "all"."""
        value = self.sup_node_horizon
        if value is None:
            return None
        if value == "all":
            return math.inf
        _positive_number("sup_node_horizon", value)
        return float(value)

    def node_config(self) -> NodeSolveConfig:
        return NodeSolveConfig(fixed_point_tol=self.fixed_point_tol, max_iters=self.max_iters)

    @property
    def effective_fine_level(self) -> int:
        return self.fine_level if self.fine_level is not None else max(self.mesh_levels)

    def summary(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _positive_number(name: str, value) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value) or value <= 0:
        raise ConfigValidationError(name, f"must be a positive finite number, got {value!r}")


def _int_at_least(name: str, value, minimum: int) -> None:
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ConfigValidationError(name, f"must be an integer >= {minimum}, got {value!r}")


def _increasing_ints(name: str, values, minimum: int) -> None:
    if not isinstance(values, list) or not values:
        raise ConfigValidationError(name, "must be a nonempty list")
    for v in values:
        _int_at_least(name, v, minimum)
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ConfigValidationError(name, f"must be strictly increasing, got {values}")
