"""
Drivers f(t, y, z), terminal conditions, and sampling-based checks of the
Lipschitz, monotonicity, bound and moment assumptions.

All callables are evaluated on numpy arrays; presets broadcast over (t, y, z).
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from core.errors import ConfigValidationError, GeneratorError, InputError

logger = logging.getLogger(__name__)

# names an inline expression may use besides t, y, z (or x, t for terminals)
_EXPR_NAMESPACE = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp, "log": np.log,
    "sqrt": np.sqrt, "abs": np.abs, "tanh": np.tanh, "cosh": np.cosh, "sinh": np.sinh,
    "minimum": np.minimum, "maximum": np.maximum, "where": np.where, "pi": np.pi,
}


def _finite(values, what: str) -> np.ndarray:
    out = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(out)):
        raise GeneratorError(f"{what} returned a non-finite value")
    return out


def _scalar_or_array(values: np.ndarray):
    return float(values) if values.ndim == 0 else values


def _shape(*args) -> tuple[int, ...]:
    return np.broadcast_shapes(*(np.shape(a) for a in args))


@dataclass(frozen=True)
class Generator:
    fn: Callable
    K: float
    mu: float | None = None
    bound: float = math.inf
    name: str = "custom"
    depends_on_y: bool = True

    def __post_init__(self):
        if not (math.isfinite(self.K) and self.K >= 0):
            raise InputError(f"Lipschitz constant must be finite and >= 0, got {self.K}")
        if self.mu is not None and not (math.isfinite(self.mu) and self.mu > 0):
            raise InputError(f"monotonicity constant must be finite and > 0, got {self.mu}")

    def eval(self, t, y, z):
        """f(t, y, z); GeneratorError on non-finite output."""
        out = _finite(np.broadcast_to(self.fn(t, y, z), _shape(t, y, z)), f"driver {self.name}")
        return _scalar_or_array(out)

    def __call__(self, t, y, z):
        return self.eval(t, y, z)

    def __add__(self, other: "Generator") -> "Generator":
        terms = (self, other)
        mus = [g.mu for g in terms if g.depends_on_y]
        mu = sum(mus) if mus and all(m is not None for m in mus) else None
        return Generator(
            fn=lambda t, y, z, a=self.fn, b=other.fn: a(t, y, z) + b(t, y, z),
            K=self.K + other.K,
            mu=mu,
            bound=self.bound + other.bound,
            name=f"{self.name}+{other.name}",
            depends_on_y=self.depends_on_y or other.depends_on_y,
        )


def zero_generator() -> Generator:
    return Generator(fn=lambda t, y, z: np.zeros(_shape(t, y, z)), K=0.0, bound=0.0, name="zero",
                     depends_on_y=False)


def constant_generator(c: float) -> Generator:
    return Generator(fn=lambda t, y, z: np.full(_shape(t, y, z), float(c)), K=0.0, bound=abs(float(c)),
                     name=f"constant:{c:g}", depends_on_y=False)


def linear_generator(alpha: float, beta: float, c: float) -> Generator:
    """f = alpha*y + beta*z + c. Monotone with mu = -alpha when alpha < 0."""
    alpha, beta, c = float(alpha), float(beta), float(c)
    return Generator(
        fn=lambda t, y, z: alpha * np.asarray(y, dtype=float) + beta * np.asarray(z, dtype=float) + c,
        K=max(abs(alpha), abs(beta)),
        mu=-alpha if alpha < 0 else None,
        bound=abs(c) if alpha == 0 and beta == 0 else math.inf,
        name=f"linear:{alpha:g},{beta:g},{c:g}",
        depends_on_y=alpha != 0,
    )


def sin_z_generator() -> Generator:
    return Generator(fn=lambda t, y, z: np.sin(np.asarray(z, dtype=float)) + 0.0 * np.asarray(y, dtype=float),
                     K=1.0, bound=1.0, name="sin-z", depends_on_y=False)


def _numbers(text: str, count: int, field_name: str) -> list[float]:
    parts = [p for p in text.split(",") if p.strip()]
    if len(parts) != count:
        raise ConfigValidationError(field_name, f"expected {count} numbers, got '{text}'")
    try:
        return [float(p) for p in parts]
    except ValueError as e:
        raise ConfigValidationError(field_name, f"not a number in '{text}'") from e


def _compile(expr: str, variables: Sequence[str], field_name: str):
    try:
        code = compile(expr, f"<{field_name}>", "eval")
    except SyntaxError as e:
        raise ConfigValidationError(field_name, f"cannot parse expression '{expr}'") from e
    unknown = set(code.co_names) - set(_EXPR_NAMESPACE) - set(variables)
    if unknown:
        raise ConfigValidationError(field_name, f"unknown names {sorted(unknown)} in '{expr}'")
    return code


def inline_generator(spec: Mapping, field_name: str = "generator") -> Generator:
    """{"expr": "-y + sin(z)", "K": 2, "mu": 1, "bound": ...} compiled against numpy."""
    if "expr" not in spec or "K" not in spec:
        raise ConfigValidationError(field_name, "inline generator needs 'expr' and 'K'")
    code = _compile(str(spec["expr"]), ("t", "y", "z"), field_name)

    def fn(t, y, z):
        with np.errstate(all="ignore"):
            scope = dict(_EXPR_NAMESPACE, t=np.asarray(t, dtype=float), y=np.asarray(y, dtype=float),
                         z=np.asarray(z, dtype=float))
            return np.asarray(eval(code, {"__builtins__": {}}, scope), dtype=float)

    mu = spec.get("mu")
    try:
        return Generator(fn=fn, K=float(spec["K"]), mu=None if mu is None else float(mu),
                         bound=float(spec.get("bound", math.inf)), name=str(spec["expr"]),
                         depends_on_y="y" in code.co_names)
    except (TypeError, ValueError) as e:
        raise ConfigValidationError(field_name, str(e)) from e


def parse_generator(spec, field_name: str = "generator") -> Generator:
    """
    Build a driver from a preset name, a '+'-joined sum of presets, or an inline mapping.

    Presets: "zero", "constant:c", "linear:alpha,beta,c", "sin-z".
    """
    if isinstance(spec, Mapping):
        return inline_generator(spec, field_name)
    if not isinstance(spec, str) or not spec.strip():
        raise ConfigValidationError(field_name, "expected a preset name or an inline mapping")
    terms = re.split(r"\+(?=[a-z])", spec.strip())
    built = [_preset(term.strip(), field_name) for term in terms]
    total = built[0]
    for g in built[1:]:
        total = total + g
    return total


def _preset(term: str, field_name: str) -> Generator:
    name, _, args = term.partition(":")
    if name == "zero" and not args:
        return zero_generator()
    if name == "constant":
        return constant_generator(*_numbers(args, 1, field_name))
    if name == "linear":
        return linear_generator(*_numbers(args, 3, field_name))
    if name == "sin-z" and not args:
        return sin_z_generator()
    raise ConfigValidationError(field_name, f"unknown generator preset '{term}'")


TERMINAL_KINDS = ("exit_state", "exit_state_time", "constant")


@dataclass(frozen=True)
class TerminalCondition:
    kind: str
    g: Callable
    bound: float = math.inf
    name: str = "custom"

    def __post_init__(self):
        if self.kind not in TERMINAL_KINDS:
            raise InputError(f"terminal kind must be one of {TERMINAL_KINDS}, got {self.kind}")

    def evaluate(self, x, t=0.0):
        """xi at exit state x and exit time t."""
        x = np.asarray(x, dtype=float)
        if self.kind == "constant":
            raw = np.full(x.shape, float(self.g()))
        elif self.kind == "exit_state":
            raw = self.g(x)
        else:
            raw = self.g(x, np.asarray(t, dtype=float))
        out = _finite(np.broadcast_to(raw, _shape(x, t) if self.kind == "exit_state_time" else x.shape),
                      f"terminal {self.name}")
        return _scalar_or_array(out)

    def __call__(self, x, t=0.0):
        return self.evaluate(x, t)


def constant_terminal(c: float) -> TerminalCondition:
    return TerminalCondition(kind="constant", g=lambda: float(c), bound=abs(float(c)), name=f"constant:{c:g}")


def parse_terminal(spec, field_name: str = "terminal") -> TerminalCondition:
    """
    Presets: "exp", "identity", "constant:c", "linear:slope,intercept".
    Inline: {"expr": "exp(x) * (1 + t)", "bound": ...}; using t makes it time dependent.
    """
    if isinstance(spec, Mapping):
        if "expr" not in spec:
            raise ConfigValidationError(field_name, "inline terminal needs 'expr'")
        code = _compile(str(spec["expr"]), ("x", "t"), field_name)
        bound = float(spec.get("bound", math.inf))
        if "t" in code.co_names:
            def g_xt(x, t):
                with np.errstate(all="ignore"):
                    return np.asarray(eval(code, {"__builtins__": {}}, dict(_EXPR_NAMESPACE, x=x, t=t)), dtype=float)
            return TerminalCondition(kind="exit_state_time", g=g_xt, bound=bound, name=str(spec["expr"]))

        def g_x(x):
            with np.errstate(all="ignore"):
                return np.asarray(eval(code, {"__builtins__": {}}, dict(_EXPR_NAMESPACE, x=x)), dtype=float)
        return TerminalCondition(kind="exit_state", g=g_x, bound=bound, name=str(spec["expr"]))

    if not isinstance(spec, str) or not spec.strip():
        raise ConfigValidationError(field_name, "expected a preset name or an inline mapping")
    name, _, args = spec.strip().partition(":")
    if name == "exp" and not args:
        return TerminalCondition(kind="exit_state", g=np.exp, name="exp")
    if name == "identity" and not args:
        return TerminalCondition(kind="exit_state", g=lambda x: x, name="identity")
    if name == "constant":
        return constant_terminal(*_numbers(args, 1, field_name))
    if name == "linear":
        slope, intercept = _numbers(args, 2, field_name)
        return TerminalCondition(kind="exit_state", g=lambda x: slope * x + intercept,
                                 name=f"linear:{slope:g},{intercept:g}")
    raise ConfigValidationError(field_name, f"unknown terminal preset '{spec}'")


@dataclass(frozen=True)
class SampleBox:
    t: tuple[float, float] = (0.0, 1.0)
    y: tuple[float, float] = (-2.0, 2.0)
    z: tuple[float, float] = (-2.0, 2.0)


@dataclass
class AssumptionReport:
    lipschitz_estimate: float = 0.0
    lipschitz_ok: bool = True
    monotonicity_violations: int = 0
    monotonicity_checked: bool = False
    bound_estimate: float = 0.0
    bound_ok: bool = True
    moment_delta: float | None = None
    moment_values: dict[str, float] = field(default_factory=dict)
    moments_by_n: dict[str, dict[int, float]] = field(default_factory=dict)
    growth_flags: dict[str, bool] = field(default_factory=dict)
    sample_count: int = 0

    @property
    def passed(self) -> bool:
        return (self.lipschitz_ok and self.bound_ok and self.monotonicity_violations == 0
                and not any(self.growth_flags.values()))


def validate_generator(gen: Generator, sample_box: SampleBox, sample_count: int, seed: int = 0,
                       tol: float = 1e-9, fd_step: float = 1e-3) -> AssumptionReport:
    """
    Empirical Lipschitz quotient, monotonicity violations and sup bound on a box sample.

    Args:
        gen: driver with its claimed constants
        sample_box: ranges for t, y and z
        sample_count: number of sample points (pairs are formed between two draws)
        seed: RNG seed
        tol: slack on the monotonicity inequality and the bound
        fd_step: coordinate step of the finite-difference quotients

    Returns:
        AssumptionReport
    """
    if sample_count < 2:
        raise InputError(f"sample_count must be >= 2, got {sample_count}")
    rng = np.random.default_rng(seed)
    t = rng.uniform(*sample_box.t, size=sample_count)
    y, y2 = rng.uniform(*sample_box.y, size=(2, sample_count))
    z, z2 = rng.uniform(*sample_box.z, size=(2, sample_count))

    f1 = np.asarray(gen.eval(t, y, z))
    f2 = np.asarray(gen.eval(t, y2, z2))
    spread = np.abs(y - y2) + np.abs(z - z2)
    keep = spread > 0
    pair_quotient = np.abs(f1 - f2)[keep] / spread[keep]

    # coordinate quotients catch the direction where the constant is attained
    h_y = (y + fd_step) - y
    h_z = (z + fd_step) - z
    q_y = np.abs(np.asarray(gen.eval(t, y + fd_step, z)) - f1) / h_y
    q_z = np.abs(np.asarray(gen.eval(t, y, z + fd_step)) - f1) / h_z
    lipschitz = float(max(pair_quotient.max(initial=0.0), q_y.max(), q_z.max()))

    report = AssumptionReport(
        lipschitz_estimate=lipschitz,
        lipschitz_ok=lipschitz <= gen.K * (1 + 1e-6) + 1e-9,
        bound_estimate=float(max(np.abs(f1).max(), np.abs(f2).max())),
        sample_count=sample_count,
    )
    report.bound_ok = report.bound_estimate <= gen.bound + tol

    if gen.mu is not None:
        f_mono = np.asarray(gen.eval(t, y2, z))
        dy = y - y2
        lhs = dy * (f1 - f_mono)
        report.monotonicity_checked = True
        report.monotonicity_violations = int(np.count_nonzero(lhs > -gen.mu * dy**2 + tol))

    logger.info("validated %s: L=%.6g (claimed %.6g), violations=%d, bound=%.6g",
                gen.name, report.lipschitz_estimate, gen.K, report.monotonicity_violations,
                report.bound_estimate)
    return report


def _moment(samples: np.ndarray, delta: float) -> float:
    p = 1.0 + delta
    return float(np.mean(np.abs(samples) ** p) ** (1.0 / p))


def validate_terminal_family(xi_by_n: Mapping[int, Sequence[float]], tau_by_n: Mapping[int, Sequence[float]],
                             delta: float = 1.0, growth_threshold: float = 1.5) -> AssumptionReport:
    """
    sup_n of the (1+delta)-moments of xi^n and tau^n, with a growth flag per family.

    A family is flagged when its moment at the largest n exceeds growth_threshold
    times its moment at the smallest n.
    """
    if delta <= 0:
        raise InputError(f"delta must be > 0, got {delta}")
    report = AssumptionReport(moment_delta=delta)
    for key, family in (("xi", xi_by_n), ("tau", tau_by_n)):
        if not family:
            raise InputError(f"no {key} samples")
        per_n = {}
        for n in sorted(family):
            values = np.asarray(family[n], dtype=float)
            if values.size == 0:
                raise InputError(f"empty {key} sample for n={n}")
            per_n[int(n)] = _moment(values, delta)
        report.moments_by_n[key] = per_n
        report.moment_values[key] = max(per_n.values())
        first, last = per_n[min(per_n)], per_n[max(per_n)]
        report.growth_flags[key] = bool(first > 0 and last > growth_threshold * first)
    return report
